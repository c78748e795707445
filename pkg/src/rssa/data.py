"""Procedural image corpora and image-folder loading.

The source family is anti-aliased ellipses and rectangles over a two-color
linear gradient. Target sets reuse the same renderer and push the result
through a fixed stylization, so the shapes (and hence edges) carry over while
the appearance changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

FAMILIES = ("shapes",)
STYLES = ("none", "palette", "sketch")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SUPERSAMPLE = 4


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(0, 255, size=(2, 3))
    angle = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    t = (xx * math.cos(angle) + yy * math.sin(angle)) / math.sqrt(0.5) + 0.5
    t = np.clip(t, 0, 1)[..., None]
    return (1 - t) * c0 + t * c1


def render_shapes(rng: np.random.Generator, resolution: int = 32) -> Image.Image:
    """One sample of the ``shapes`` family at ``resolution`` (box-filtered from a 4x canvas)."""
    size = resolution * SUPERSAMPLE
    img = Image.fromarray(_gradient(rng, size).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0.25, 0.75, size=2) * size
        rx, ry = rng.uniform(0.12, 0.35, size=2) * size
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        box = [cx - rx, cy - ry, cx + rx, cy + ry]
        if rng.random() < 0.5:
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    return img.reduce(SUPERSAMPLE)


def stylize(img: Image.Image, style: str) -> Image.Image:
    """Map a source render into a target domain with the same layout."""
    if style == "none":
        return img
    arr = np.asarray(img, dtype=np.float64) / 255.0
    luma = arr @ np.array([0.299, 0.587, 0.114])
    if style == "palette":
        # three-stop duotone: deep blue -> magenta -> pale yellow
        stops = np.array([[20, 24, 82], [190, 40, 120], [250, 236, 160]], dtype=np.float64)
        t = np.clip(luma, 0, 1) * 2
        lo = np.minimum(t.astype(int), 1)
        frac = (t - lo)[..., None]
        out = (1 - frac) * stops[lo] + frac * stops[lo + 1]
    elif style == "sketch":
        gy, gx = np.gradient(luma)
        mag = np.hypot(gx, gy)
        mag = mag / max(mag.max(), 1e-8)
        out = np.repeat((255 * (1 - mag))[..., None], 3, axis=2)
    else:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    return Image.fromarray(np.clip(np.rint(out), 0, 255).astype(np.uint8), "RGB")


def generate_toy_source_dataset(
    out_dir: str | Path,
    count: int,
    seed: int,
    family: str = "shapes",
    style: str = "none",
    resolution: int = 32,
) -> list[Path]:
    """Write ``count`` PNGs named ``00000.png`` onward; same arguments give identical bytes."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(5, len(str(count - 1)))
    paths = []
    for i in range(count):
        path = out / f"{i:0{width}d}.png"
        stylize(render_shapes(rng, resolution), style).save(path, format="PNG")
        paths.append(path)
    return paths


@dataclass
class ImageDataset:
    images: torch.Tensor  # (n, 3, R, R) in [-1, 1]
    files: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, count: int, generator: torch.Generator) -> torch.Tensor:
        """Draw ``count`` images uniformly with replacement."""
        idx = torch.randint(len(self), (count,), generator=generator)
        return self.images[idx]


def _to_tensor(img: Image.Image, resolution: int) -> torch.Tensor:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.LANCZOS)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_image_dir(path: str | Path, resolution: int = 32, limit: int | None = None) -> ImageDataset:
    """Load every image in ``path`` in lexicographic filename order, center-cropped and resized."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ValueError(f"no images in {path}")
    tensors = []
    for f in files:
        with Image.open(f) as img:
            tensors.append(_to_tensor(img, resolution))
    return ImageDataset(images=torch.stack(tensors), files=[f.name for f in files])


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(B, 3, H, W)`` in [-1, 1] -> ``(B, H, W, 3)`` uint8."""
    x = ((images.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()
