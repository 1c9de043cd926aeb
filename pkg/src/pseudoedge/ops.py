"""Differentiable image operators shared by the losses and the networks."""

from __future__ import annotations

import torch
import torch.nn.functional as F

SOBEL_X = ((-1.0, 0.0, 1.0),
           (-2.0, 0.0, 2.0),
           (-1.0, 0.0, 1.0))


def sobel_kernels(dtype=torch.float32, device=None) -> torch.Tensor:
    """(2, 1, 3, 3) weight tensor: x-direction kernel, then its transpose."""
    kx = torch.tensor(SOBEL_X, dtype=dtype, device=device)
    return torch.stack([kx, kx.t()]).unsqueeze(1)


def sobel(prob: torch.Tensor) -> torch.Tensor:
    """Directional Sobel responses of a single-channel map.

    Cross-correlation (no kernel flip) with replicate padding, evaluated in
    separable form (central difference, then [1, 2, 1] smoothing) so that a
    constant map gives exactly zero.

    Args:
        prob: ``(N, 1, H, W)`` tensor, or a bare ``(H, W)`` map.

    Returns:
        ``(N, 2, H, W)`` tensor (``(2, H, W)`` for a 2-D input); channel 0
        responds to changes along columns, channel 1 along rows.
    """
    squeeze = prob.dim() == 2
    x = prob[None, None] if squeeze else prob
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {tuple(prob.shape)}")
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    dx = x[..., :, 2:] - x[..., :, :-2]
    dy = x[..., 2:, :] - x[..., :-2, :]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    out = torch.cat([gx, gy], dim=1)
    return out[0] if squeeze else out


def attention_gate(edge: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Multiply both edge channels by a single-channel attention map."""
    if edge.dim() != attention.dim():
        raise ValueError("edge and attention must have the same rank")
    if edge.shape[-2:] != attention.shape[-2:]:
        raise ValueError(f"shape mismatch: edge {tuple(edge.shape)} vs attention {tuple(attention.shape)}")
    ch_dim = edge.dim() - 3
    if attention.shape[ch_dim] != 1 or edge.shape[ch_dim] != 2:
        raise ValueError("expected a 2-channel edge map and a 1-channel attention map")
    if edge.dim() == 4 and edge.shape[0] != attention.shape[0]:
        raise ValueError("batch size mismatch")
    return edge * attention
