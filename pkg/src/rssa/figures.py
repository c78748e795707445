"""Interpolation strips and paired sample grids, written as PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .compression import ModulationSchedule, SubspaceBasis, project_stack
from .data import to_uint8
from .generator import sample_latent
from .scs import edge_map


def render(G_s, G, z: torch.Tensor, basis: SubspaceBasis | None = None,
           schedule: ModulationSchedule | None = None) -> torch.Tensor:
    """Images of ``G`` along the shared data path: ``G_s`` mapping, optional projection, ``G`` synthesis."""
    with torch.no_grad():
        styles = G_s.map(z)
        if basis is not None:
            styles = project_stack(styles, basis, schedule or ModulationSchedule.default(styles.shape[1]))
        return G.synthesize(styles)[0]


def interpolate(G_s, generators, z_a: torch.Tensor, z_b: torch.Tensor, steps: int,
                basis: SubspaceBasis | None = None, schedule: ModulationSchedule | None = None) -> torch.Tensor:
    """Frames of a straight line from ``z_a`` to ``z_b``, one row per generator: ``(rows, steps, 3, H, W)``."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    t = torch.linspace(0, 1, steps, dtype=z_a.dtype)[:, None]
    z = (1 - t) * z_a[None] + t * z_b[None]
    # the endpoints are the inputs themselves, not a rounded blend
    z[0], z[-1] = z_a, z_b
    return torch.stack([render(G_s, G, z, basis, schedule) for G in generators])


def adjacent_mse(frames: torch.Tensor) -> torch.Tensor:
    """Pixel MSE between consecutive frames of ``(steps, 3, H, W)``."""
    return (frames[1:] - frames[:-1]).pow(2).flatten(1).mean(1)


def tile(images: np.ndarray, rows: int, cols: int) -> Image.Image:
    """Lay ``(rows * cols, H, W, 3)`` uint8 images out row-major."""
    n, h, w, c = images.shape
    if n != rows * cols:
        raise ValueError(f"{n} images do not fill a {rows}x{cols} grid")
    grid = images.reshape(rows, cols, h, w, c).transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, c)
    return Image.fromarray(grid, "RGB")


def save_png(img: Image.Image, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path


def save_strip(frames: torch.Tensor, path: str | Path) -> Path:
    rows, steps = frames.shape[:2]
    return save_png(tile(to_uint8(frames.flatten(0, 1)), rows, steps), path)


def sample_grid(G_s, G_t, rows: int, cols: int, seed: int, basis: SubspaceBasis | None = None,
                schedule: ModulationSchedule | None = None) -> Image.Image:
    """``rows x cols`` latent cells, each a source image followed by its target image."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid needs rows, cols >= 1, got {rows}x{cols}")
    z = sample_latent(rows * cols, seed, G_s.cfg.z_dim)
    src = render(G_s, G_s, z, basis, schedule)
    tgt = render(G_s, G_t, z, basis, schedule)
    pairs = torch.stack([src, tgt], dim=1).flatten(0, 1)
    return tile(to_uint8(pairs), rows, 2 * cols)


def edge_grid(src: torch.Tensor, tgt: torch.Tensor, detector=None) -> Image.Image:
    """One row per sample: source image, target image, source edges, target edges."""
    def gray(e: torch.Tensor) -> torch.Tensor:
        return (e.float() * 2 - 1)[:, None].expand(-1, 3, -1, -1)

    cells = torch.stack([src, tgt, gray(edge_map(src, detector)), gray(edge_map(tgt, detector))], dim=1)
    return tile(to_uint8(cells.flatten(0, 1)), src.shape[0], 4)
