"""Structural Consistency Score.

For each latent, the source and adapted generators render an image pair from
one shared style stack; the score is the dice coefficient between the two
soft edge maps, averaged over latents.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .compression import ModulationSchedule, ProjectionCounter, SubspaceBasis, project_stack

LUMA = (0.299, 0.587, 0.114)


class EdgeDetectorError(ValueError):
    pass


class SobelEdgeDetector:
    """Gradient magnitude of luma, scaled so each image's strongest edge is 1."""

    name = "sobel"

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = (images.to(torch.float64) + 1.0) / 2.0
        luma = torch.tensor(LUMA, dtype=x.dtype)
        gray = (x * luma[:, None, None]).sum(1, keepdim=True)
        g = F.pad(gray, (1, 1, 1, 1), mode="replicate")[:, 0]
        # separable form: smoothing then a difference of shifted copies, so
        # flat regions give exactly zero
        smooth_v = g[:, :-2] + 2 * g[:, 1:-1] + g[:, 2:]
        smooth_h = g[:, :, :-2] + 2 * g[:, :, 1:-1] + g[:, :, 2:]
        gx = smooth_v[:, :, 2:] - smooth_v[:, :, :-2]
        gy = smooth_h[:, 2:] - smooth_h[:, :-2]
        mag = (gx * gx + gy * gy).sqrt()
        peak = mag.flatten(1).amax(1).clamp_min(self.eps)
        return (mag / peak[:, None, None]).clamp(0.0, 1.0)


class ExternalEdgeDetector:
    """A TorchScript edge network mapping ``(B, 3, H, W)`` in [-1, 1] to ``(B, [1,] H, W)``."""

    def __init__(self, path: str | Path):
        path = Path(path)
        self.name = f"external:{path}"
        if not path.is_file():
            raise EdgeDetectorError(f"edge detector model not found: {path}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                self.model = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise EdgeDetectorError(f"cannot load edge detector {path}: {exc}") from exc
        self.model.eval()

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            out = self.model(images)
        if out.dim() == 4:
            out = out[:, 0]
        if out.shape != (images.shape[0], *images.shape[-2:]):
            raise EdgeDetectorError(f"edge detector returned shape {tuple(out.shape)}")
        return out.to(torch.float64).nan_to_num(0.0).clamp(0.0, 1.0)


def make_detector(spec: str = "sobel"):
    """``"sobel"`` or ``"external:<path>"``."""
    if spec == "sobel":
        return SobelEdgeDetector()
    if spec.startswith("external:"):
        return ExternalEdgeDetector(spec.split(":", 1)[1])
    raise EdgeDetectorError(f"unknown edge detector {spec!r}")


def edge_map(image: torch.Tensor, detector=None) -> torch.Tensor:
    """Edge map(s) in [0, 1] for ``(3, H, W)`` or ``(B, 3, H, W)`` images."""
    detector = detector or SobelEdgeDetector()
    single = image.dim() == 3
    out = detector(image[None] if single else image)
    return out[0] if single else out


def dice(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Soft dice ``2<a,b> / (|a|^2 + |b|^2)`` over the last two dims; 1 when both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"edge maps differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    inner = (a * b).flatten(-2).sum(-1)
    denom = (a * a).flatten(-2).sum(-1) + (b * b).flatten(-2).sum(-1)
    score = torch.where(denom > 0, 2.0 * inner / torch.where(denom > 0, denom, 1.0), torch.ones_like(denom))
    return score.clamp(0.0, 1.0)


@dataclass
class ScsReport:
    scores: list[float]
    mean: float
    samples: int
    detector: str
    seed: int
    projection: bool

    def to_dict(self) -> dict:
        return asdict(self)


def paired_images(G_s, G_t, z: torch.Tensor, basis: SubspaceBasis | None = None,
                  schedule: ModulationSchedule | None = None,
                  counter: ProjectionCounter | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Source and target renders of ``z`` through the shared (optionally projected) style path."""
    with torch.no_grad():
        styles = G_s.map(z)
        if basis is not None:
            styles = project_stack(styles, basis, schedule or ModulationSchedule.default(styles.shape[1]), counter)
        return G_s.synthesize(styles)[0], G_t.synthesize(styles)[0]


def scs_score(
    G_s,
    G_t,
    samples: int = 500,
    seed: int = 0,
    detector=None,
    basis: SubspaceBasis | None = None,
    schedule: ModulationSchedule | None = None,
    batch_size: int = 100,
) -> ScsReport:
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    detector = detector or SobelEdgeDetector()
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(samples, G_s.cfg.z_dim, generator=gen)
    scores: list[float] = []
    for start in range(0, samples, batch_size):
        xs, xt = paired_images(G_s, G_t, z[start : start + batch_size], basis, schedule)
        scores.extend(dice(detector(xt), detector(xs)).tolist())
    mean = sum(scores) / len(scores)
    return ScsReport(scores=scores, mean=mean, samples=samples, detector=detector.name, seed=int(seed),
                     projection=basis is not None)
