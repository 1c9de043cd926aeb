"""Point annotations and Voronoi-derived training labels.

Label maps are ``uint8`` grids using the constants below. Points are
``(n, 2)`` integer arrays of ``(row, col)`` pairs.
"""

from __future__ import annotations

import csv
import os

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

NEGATIVE = 0
POSITIVE = 1
IGNORE = 255

_NEIGHBOURS = 4  # candidates pulled from the kd-tree before exact tie repair


def empty_points() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def validate_points(points, shape) -> np.ndarray:
    """Return ``points`` as an int64 ``(n, 2)`` array, checking bounds and uniqueness."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    h, w = shape
    if len(pts) and ((pts[:, 0] < 0).any() or (pts[:, 0] >= h).any()
                     or (pts[:, 1] < 0).any() or (pts[:, 1] >= w).any()):
        raise ValueError(f"point outside the {h}x{w} grid")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("duplicate points")
    return pts


def extract_points(mask: np.ndarray) -> np.ndarray:
    """One point per instance: the centroid, rounded half-up per axis.

    Points come back ordered by instance id. A centroid landing outside a
    non-convex instance is kept as is.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("instance mask must be 2-D")
    if (mask < 0).any():
        raise ValueError("instance ids must be non-negative")
    ids = np.unique(mask)
    ids = ids[ids != 0]
    if len(ids) == 0:
        return empty_points()
    centroids = np.asarray(ndimage.center_of_mass(np.ones_like(mask), mask, ids), dtype=np.float64)
    pts = np.floor(centroids + 0.5).astype(np.int64)
    # centroids are convex combinations of pixel coordinates, so this is a no-op
    # except for float noise at the far edge
    pts[:, 0] = np.clip(pts[:, 0], 0, mask.shape[0] - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, mask.shape[1] - 1)
    return pts


def nearest_point_partition(points, height: int, width: int):
    """Euclidean distance to, and index of, the nearest point for every pixel.

    Ties go to the lowest point index. Squared distances between integer
    coordinates are exact integers, so ties are detected exactly.

    Returns:
        (distance, owner): float64 and int64 arrays of shape ``(height, width)``.
    """
    pts = validate_points(points, (height, width))
    n = len(pts)
    if n == 0:
        raise ValueError("no points")
    rr, cc = np.mgrid[0:height, 0:width]
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1)

    k = min(n, _NEIGHBOURS)
    _, idx = cKDTree(pts).query(pix, k=k)
    idx = idx.reshape(len(pix), k)
    # exact integer squared distances for every candidate
    d2 = ((pts[idx] - pix[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1)
    tied = np.where(d2 == best[:, None], idx, n)
    owner = tied.min(axis=1)

    if k < n:
        # every candidate tied: more equidistant points may exist beyond k
        unresolved = np.flatnonzero((d2 == best[:, None]).all(axis=1))
        for start in range(0, len(unresolved), 4096):
            chunk = unresolved[start:start + 4096]
            full = ((pts[None, :, :] - pix[chunk, None, :]) ** 2).sum(axis=2)
            owner[chunk] = full.argmin(axis=1)  # argmin returns the first minimum
            best[chunk] = full.min(axis=1)

    return np.sqrt(best).reshape(height, width), owner.reshape(height, width)


def partition_boundary(owner: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour owned by a different point."""
    edge = np.zeros(owner.shape, dtype=bool)
    dv = owner[1:, :] != owner[:-1, :]
    dh = owner[:, 1:] != owner[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def positive_footprint(points, height: int, width: int, radius: int = 0) -> np.ndarray:
    """Boolean mask of pixels within Chebyshev ``radius`` of any point."""
    out = np.zeros((height, width), dtype=bool)
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        return out
    if radius < 0:
        raise ValueError("radius must be non-negative")
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r = pts[:, 0] + dr
            c = pts[:, 1] + dc
            ok = (r >= 0) & (r < height) & (c >= 0) & (c < width)
            out[r[ok], c[ok]] = True
    return out


def voronoi_labels(points, height: int, width: int, positive_radius: int = 0) -> np.ndarray:
    """Tri-state label map: points are POSITIVE, Voronoi ribbons NEGATIVE, the rest IGNORE."""
    pts = validate_points(points, (height, width))
    labels = np.full((height, width), IGNORE, dtype=np.uint8)
    if len(pts) == 0:
        return labels
    if len(pts) >= 2:
        _, owner = nearest_point_partition(pts, height, width)
        labels[partition_boundary(owner)] = NEGATIVE
    labels[positive_footprint(pts, height, width, positive_radius)] = POSITIVE
    return labels


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col"]:
            raise ValueError(f"{path}: expected header 'row,col'")
        rows = [(int(r), int(c)) for r, c in reader]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def write_points_csv(path, points) -> None:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("row,col\n")
        for r, c in pts:
            fh.write(f"{r},{c}\n")
