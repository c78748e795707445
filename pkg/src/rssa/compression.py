"""Latent space compression.

The few target images are inverted into the source generator's layered style
space; for every layer the inverted codes span a subspace, and sampled codes
are pulled toward it by a least-squares projection that keeps the code's
norm, blended per layer with a modulation coefficient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

EPS = 1e-8

# coefficient per layer of a 14-layer (256px) style stack, shallow to deep
REFERENCE_SCHEDULE: tuple[float, ...] = (0, 0, 0, 0.1, 0.1, 0.1, 0.1, 0.3, 0.3, 0.7, 0.7, 0.9, 0.9, 0.9)


def resample_schedule(schedule: Sequence[float], num_layers: int) -> tuple[float, ...]:
    """Piecewise-constant resampling of a per-layer schedule to ``num_layers``.

    Each new layer takes the value of the source layer containing the midpoint
    of its fractional-depth interval.
    """
    n = len(schedule)
    if num_layers == n:
        return tuple(float(a) for a in schedule)
    out = []
    for i in range(num_layers):
        mid = (i + 0.5) / num_layers
        out.append(float(schedule[min(n - 1, int(mid * n))]))
    return tuple(out)


@dataclass(frozen=True)
class ModulationSchedule:
    alphas: tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError(f"modulation coefficients must lie in [0, 1]: {self.alphas}")
        if any(b < a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError(f"modulation coefficients must be nondecreasing with depth: {self.alphas}")

    @classmethod
    def default(cls, num_layers: int) -> ModulationSchedule:
        return cls(resample_schedule(REFERENCE_SCHEDULE, num_layers))

    def __len__(self) -> int:
        return len(self.alphas)


@dataclass
class InvertedCodeSet:
    codes: torch.Tensor  # (n, L, w_dim)
    errors: torch.Tensor  # (n,) best pixel+downsampled MSE reached
    initial_errors: torch.Tensor  # (n,)
    history: list[list[float]] = field(default_factory=list)  # best-so-far per checkpoint, per image

    def __post_init__(self):
        if self.codes.shape[0] < 1:
            raise ValueError("need at least one inverted code")
        if not torch.isfinite(self.codes).all():
            raise ValueError("inverted codes contain non-finite values")

    @property
    def diverged(self) -> torch.Tensor:
        return self.errors > self.initial_errors


def mean_style(G, samples: int = 10_000, seed: int = 0) -> torch.Tensor:
    """Empirical mean of the mapped style over ``samples`` prior draws, ``(L, w_dim)``."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(samples, G.cfg.z_dim, generator=gen)
    with torch.no_grad():
        return G.map(z).mean(0)


def reconstruction_error(G, styles: torch.Tensor, images: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Per-image pixel MSE plus MSE after ``factor``x average-pool downsampling."""
    out, _ = G.synthesize(styles)
    pix = (out - images).pow(2).flatten(1).mean(1)
    low = (F.avg_pool2d(out, factor) - F.avg_pool2d(images, factor)).pow(2).flatten(1).mean(1)
    return pix + low


def invert_images(
    G,
    images: torch.Tensor,
    steps: int = 500,
    lr: float = 0.01,
    init: torch.Tensor | None = None,
    record_every: int = 10,
    mean_samples: int = 10_000,
) -> InvertedCodeSet:
    """Optimize one style code per layer per image to reconstruct ``images``.

    Starts from ``init`` (``(L, w_dim)`` or ``(n, L, w_dim)``), or from the mean
    style code. Each image's codes see only that image's loss, so the batch is
    n independent inversions. The best codes seen are kept.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    n = images.shape[0]
    if init is None:
        init = mean_style(G, mean_samples)
    if init.dim() == 2:
        init = init[None].expand(n, -1, -1)
    codes = init.detach().clone().requires_grad_(True)
    was_training = G.training
    G.eval()
    params = [p for p in G.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    opt = torch.optim.Adam([codes], lr=lr)
    try:
        with torch.no_grad():
            err = reconstruction_error(G, codes, images)
        best_err = err.clone()
        initial = err.clone()
        best_codes = codes.detach().clone()
        history = [best_err.tolist()]
        for step in range(1, steps + 1):
            err = reconstruction_error(G, codes, images)
            opt.zero_grad()
            err.sum().backward()
            opt.step()
            with torch.no_grad():
                err = reconstruction_error(G, codes, images)
                better = err < best_err
                best_err = torch.where(better, err, best_err)
                best_codes[better] = codes.detach()[better]
            if step % record_every == 0 or step == steps:
                history.append(best_err.tolist())
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
        G.train(was_training)
    result = InvertedCodeSet(codes=best_codes, errors=best_err, initial_errors=initial, history=history)
    for i in torch.nonzero(result.diverged).flatten().tolist():
        logger.warning("inversion of image %d did not improve on its initial error", i)
    return result


@dataclass(frozen=True)
class LayerBasis:
    """Column matrix ``A`` (``w_dim x n``) with its least-squares solve factor."""

    A: torch.Tensor
    solve: torch.Tensor  # (A^T A + lam I)^-1 A^T, shape (n, w_dim)
    lam: float  # regularization actually applied

    @property
    def projector(self) -> torch.Tensor:
        return self.A @ self.solve


@dataclass(frozen=True)
class SubspaceBasis:
    layers: tuple[LayerBasis, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LayerBasis:
        return self.layers[i]


def layer_basis(A: torch.Tensor, lam: float = 1e-6, max_condition: float = 1e10) -> LayerBasis:
    """Solve factor for projecting onto the column span of ``A``.

    The ridge term ``lam`` is only added when the Gram matrix is too badly
    conditioned to solve without it (e.g. duplicate or dependent columns).
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    A = A.to(torch.float64)
    gram = A.T @ A
    eig = torch.linalg.eigvalsh(gram)
    well_posed = eig[0] > 0 and eig[-1] / eig[0] < max_condition
    applied = 0.0 if well_posed or lam == 0 else lam
    reg = gram + applied * torch.eye(gram.shape[0], dtype=torch.float64)
    chol, info = torch.linalg.cholesky_ex(reg)
    if info:
        # fall back to a pseudo-inverse for a singular, unregularized Gram
        solve = torch.linalg.pinv(reg) @ A.T
    else:
        solve = torch.cholesky_solve(A.T, chol)
    return LayerBasis(A=A, solve=solve, lam=applied)


def build_subspace(codes: InvertedCodeSet | torch.Tensor, lam: float = 1e-6) -> SubspaceBasis:
    """Per-layer bases from inverted codes ``(n, L, w_dim)``; column ``i`` of layer ``l`` is ``w_i^l``."""
    c = codes.codes if isinstance(codes, InvertedCodeSet) else codes
    if c.shape[0] < 1:
        raise ValueError("need at least one code to span a subspace")
    return SubspaceBasis(tuple(layer_basis(c[:, l, :].T, lam) for l in range(c.shape[1])))


class ProjectionCounter:
    """Counts projections that collapsed to (almost) zero and were skipped."""

    def __init__(self):
        self.degenerate = 0


def project_code(
    w: torch.Tensor,
    basis: LayerBasis,
    alpha: float,
    counter: ProjectionCounter | None = None,
) -> torch.Tensor:
    """Norm-preserving projection of ``w`` (``(..., w_dim)``) onto the span, blended by ``alpha``.

    Codes whose projection has norm below ``EPS`` are returned unchanged and
    counted in ``counter``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return w
    wd = w.to(torch.float64)
    bar = wd @ basis.solve.T @ basis.A.T
    bar_norm = bar.norm(dim=-1, keepdim=True)
    degenerate = bar_norm < EPS
    rescaled = bar * wd.norm(dim=-1, keepdim=True) / bar_norm.clamp_min(EPS)
    out = alpha * rescaled + (1.0 - alpha) * wd
    out = torch.where(degenerate, wd, out)
    if counter is not None:
        counter.degenerate += int(degenerate.sum())
    return out.to(w.dtype)


def project_stack(
    styles: torch.Tensor,
    basis: SubspaceBasis,
    schedule: ModulationSchedule | Sequence[float],
    counter: ProjectionCounter | None = None,
) -> torch.Tensor:
    """Apply :func:`project_code` to each layer of ``(..., L, w_dim)`` styles."""
    alphas = schedule.alphas if isinstance(schedule, ModulationSchedule) else tuple(schedule)
    n_layers = styles.shape[-2]
    if not (len(alphas) == n_layers == len(basis)):
        raise ValueError(
            f"schedule ({len(alphas)}), stack ({n_layers}) and basis ({len(basis)}) lengths differ"
        )
    layers = [project_code(styles[..., l, :], basis[l], alphas[l], counter) for l in range(n_layers)]
    return torch.stack(layers, dim=-2)
