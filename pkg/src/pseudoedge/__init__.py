"""Weakly-supervised nuclei segmentation from point annotations.

A segmentation network is trained on Voronoi-derived point labels while a
small edge network, optionally gated by an attention module, asks the
Sobel response of its output to agree with image edges.
"""

__version__ = "0.1.0"
