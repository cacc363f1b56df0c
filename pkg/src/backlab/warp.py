"""Bilinear image warping shared by the warp trigger and spatial attacks.

A flow field holds per-pixel sampling offsets in pixel units: the output at
(i, j) is the input sampled bilinearly at (i + dy[i, j], j + dx[i, j]), with
sample coordinates clamped to the image bounds.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def identity_grid(h: int, w: int, device=None) -> torch.Tensor:
    """Normalized sampling grid (1, h, w, 2) with (x, y) in [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, device=device)
    xs = torch.linspace(-1.0, 1.0, w, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=2).unsqueeze(0)


def warp_images(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Resample a batch with per-pixel displacements.

    Args:
        x: images (n, c, h, w).
        flow: (2, h, w) shared field or (n, 2, h, w) per-sample; channel 0 is
            the x-displacement, channel 1 the y-displacement, in pixels.
    """
    n, _, h, w = x.shape
    if flow.ndim == 3:
        flow = flow.unsqueeze(0).expand(n, -1, -1, -1)
    if not flow.requires_grad and not flow.any():
        return x.clone()  # exact identity for the zero field
    dx = flow[:, 0]
    dy = flow[:, 1]
    # pixel offsets to normalized-grid offsets (align_corners spacing)
    sx = 2.0 / max(w - 1, 1)
    sy = 2.0 / max(h - 1, 1)
    grid = identity_grid(h, w, device=x.device).to(x.dtype) + torch.stack(
        (dx * sx, dy * sy), dim=3)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border",
                         align_corners=True)


def build_warp_field(grid_k: int, strength: float, image_size: tuple[int, int],
                     seed: int | None = None,
                     generator: torch.Generator | None = None,
                     noise: str = "uniform") -> torch.Tensor:
    """Smooth random displacement field (2, h, w), deterministic under seed.

    A grid_k x grid_k control grid is drawn, normalized to mean absolute
    value 1, scaled by `strength` (pixels), and bicubically upsampled.
    """
    if grid_k < 2:
        raise ValueError("grid_k must be >= 2")
    h, w = image_size
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    if noise == "uniform":
        coarse = torch.rand((1, 2, grid_k, grid_k), generator=generator) * 2.0 - 1.0
    else:
        coarse = torch.randn((1, 2, grid_k, grid_k), generator=generator)
    coarse = coarse / coarse.abs().mean()
    field = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)
    return field[0] * strength


def random_bounded_field(max_displacement: float, image_size: tuple[int, int],
                         generator: torch.Generator, grid_k: int = 4,
                         batch: int | None = None) -> torch.Tensor:
    """Smooth field(s) rescaled so the largest |displacement| equals the bound."""
    fields = []
    for _ in range(batch or 1):
        f = build_warp_field(grid_k, 1.0, image_size, generator=generator)
        peak = f.abs().max().clamp_min(1e-12)
        fields.append(f * (max_displacement / peak))
    return fields[0] if batch is None else torch.stack(fields)
