"""Cross-domain spatial structural consistency losses.

Two terms compare feature maps of the frozen source generator against the
adapted one, for the same style codes:

* self-correlation consistency (scc): every position's cosine similarity to
  every other position of the same map, matched with smooth-l1;
* disturbance correlation consistency (dcc): for codes sampled in a small ball
  around an anchor, a softmax over windowed cosine similarities between
  *different* samples' maps, matched with l1.

Feature maps are ``(B, C, H, W)`` tensors; a stack is a list of them ordered
shallow to deep. Source-side inputs are treated as constants by callers (they
come out of a frozen model), so gradients only reach the target side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

EPS = 1e-8


def smooth_l1(x: torch.Tensor, transition: float = 1.0) -> torch.Tensor:
    """Elementwise smooth-l1: ``x^2 / (2t)`` inside ``|x| <= t``, ``|x| - t/2`` outside."""
    ax = x.abs()
    return torch.where(ax <= transition, 0.5 * x * x / transition, ax - 0.5 * transition)


def _normalize(f: torch.Tensor, dim: int) -> torch.Tensor:
    # max(||u||, eps) guard: zero vectors give zero similarity instead of NaN
    return f / f.norm(dim=dim, keepdim=True).clamp_min(EPS)


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (_normalize(u, -1) * _normalize(v, -1)).sum(-1)


def _self_corr_flat(f: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, H*W) cosine matrix."""
    flat = _normalize(f.flatten(2), dim=1)
    return flat.transpose(1, 2) @ flat


def self_correlation(fmap: torch.Tensor) -> torch.Tensor:
    """Self-correlation of one map ``(C, W, H)`` as a ``(W, H, W, H)`` tensor.

    Entry ``[x, y, i, j]`` is the cosine between the feature vectors at
    ``(x, y)`` and ``(i, j)``. A leading batch dimension is passed through.
    """
    single = fmap.dim() == 3
    f = fmap[None] if single else fmap
    b, _, h, w = f.shape
    out = _self_corr_flat(f).reshape(b, h, w, h, w)
    return out[0] if single else out


@dataclass(frozen=True)
class ResolutionPolicy:
    """Where self-correlation switches from global to pooled-and-patched.

    Maps at or below ``global_max`` are correlated globally. Larger maps are
    average-pooled by ``pool`` and tiled into ``patch x patch`` blocks, each
    correlated on its own.
    """

    global_max: int = 4
    pool: int = 2
    patch: int = 2

    @classmethod
    def for_output(cls, resolution: int) -> ResolutionPolicy:
        # 256px output -> global <= 32, 2x pool, 16x16 patches
        return cls(global_max=max(1, resolution // 8), pool=2, patch=max(2, resolution // 16))


def _patched_corr(f: torch.Tensor, policy: ResolutionPolicy) -> torch.Tensor:
    """Pool and tile ``(B, C, H, W)``; returns ``(B, n_patches, p*p, p*p)``."""
    if f.shape[-1] <= policy.global_max and f.shape[-2] <= policy.global_max:
        return _self_corr_flat(f)[:, None]
    pooled = F.avg_pool2d(f, policy.pool)
    b, c, h, w = pooled.shape
    p = policy.patch
    if h % p or w % p:
        raise ValueError(f"pooled map {h}x{w} cannot be tiled into {p}x{p} patches")
    tiles = pooled.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    tiles = tiles.reshape(b * (h // p) * (w // p), c, p, p)
    corr = _self_corr_flat(tiles)
    return corr.reshape(b, (h // p) * (w // p), p * p, p * p)


def local_self_correlation(fmap: torch.Tensor, policy: ResolutionPolicy) -> list[torch.Tensor]:
    """Per-patch self-correlation matrices of one ``(C, W, H)`` map.

    Returns a single full matrix (shape ``(W, H, W, H)``) when the map is at
    or below the global threshold; otherwise one ``(p, p, p, p)`` matrix per
    patch of the pooled map, in row-major patch order.
    """
    if fmap.shape[-1] <= policy.global_max and fmap.shape[-2] <= policy.global_max:
        return [self_correlation(fmap)]
    corr = _patched_corr(fmap[None], policy)[0]
    p = policy.patch
    return [m.reshape(p, p, p, p) for m in corr]


def pool_map(fmap: torch.Tensor, factor: int) -> torch.Tensor:
    single = fmap.dim() == 3
    out = F.avg_pool2d(fmap[None] if single else fmap, factor)
    return out[0] if single else out


@dataclass(frozen=True)
class StructuralLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    smooth_l1_transition: float = 1.0
    scc_policy: ResolutionPolicy = ResolutionPolicy()
    # dcc runs on every layer with resolution <= dcc_max_res
    dcc_max_res: int = 16
    # window width = max(1, int(width * dcc_window_ratio)) unless dcc_window is set
    dcc_window_ratio: float = 0.25
    dcc_window: int | None = None
    pairs: str = "all"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.pairs not in ("all", "anchor"):
            raise ValueError(f"pairs must be 'all' or 'anchor', got {self.pairs!r}")

    @classmethod
    def for_output(cls, resolution: int, **overrides) -> StructuralLossConfig:
        # 256px output -> dcc on layers <= 128
        base = dict(scc_policy=ResolutionPolicy.for_output(resolution), dcc_max_res=resolution // 2)
        base.update(overrides)
        return cls(**base)

    def window_for(self, width: int) -> int:
        if self.dcc_window is not None:
            return self.dcc_window
        return max(1, int(width * self.dcc_window_ratio))


def _check_aligned(source: Sequence[torch.Tensor], target: Sequence[torch.Tensor]) -> None:
    if len(source) != len(target):
        raise ValueError(f"stacks have different depths: {len(source)} vs {len(target)}")
    for i, (s, t) in enumerate(zip(source, target)):
        if s.shape != t.shape:
            raise ValueError(f"layer {i} shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")


def scc_loss(
    source: Sequence[torch.Tensor],
    target: Sequence[torch.Tensor],
    config: StructuralLossConfig = StructuralLossConfig(),
) -> torch.Tensor:
    """Smooth-l1 between self-correlation matrices, summed over layers and entries.

    Averaged over the batch dimension (one latent per batch entry).
    """
    _check_aligned(source, target)
    total = source[0].new_zeros(())
    for s, t in zip(source, target):
        cs = _patched_corr(s, config.scc_policy)
        ct = _patched_corr(t, config.scc_policy)
        diff = smooth_l1(ct - cs, config.smooth_l1_transition)
        total = total + diff.flatten(1).sum(1).mean()
    return total


def window_half_width(delta: int) -> int:
    """Largest integer offset ``o`` with ``|o| < delta / 2``."""
    if delta < 1:
        raise ValueError(f"window width must be >= 1, got {delta}")
    return math.ceil(delta / 2) - 1


def _window_logits(fj: torch.Tensor, fk: torch.Tensor, delta: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Windowed cosines between ``fj`` anchors and ``fk`` neighbours.

    ``fj``: (..., C, H, W), ``fk``: (..., C, H, W) broadcastable.
    Returns logits ``(..., K*K, H, W)`` and a validity mask ``(K*K, H, W)``
    for windows clamped at the borders.
    """
    r = window_half_width(delta)
    k = 2 * r + 1
    nj = _normalize(fj, dim=-3)
    nk = _normalize(fk, dim=-3)
    h, w = nk.shape[-2:]
    lead = nk.shape[:-3]
    c = nk.shape[-3]
    padded = F.pad(nk.reshape(-1, c, h, w), (r, r, r, r))
    shifted = []
    for dm in range(k):
        for dn in range(k):
            shifted.append(padded[:, :, dm : dm + h, dn : dn + w])
    nk_win = torch.stack(shifted, dim=1).reshape(*lead, k * k, c, h, w)
    logits = (nj.unsqueeze(-4) * nk_win).sum(-3)
    ones = torch.ones(1, 1, h, w, dtype=nk.dtype, device=nk.device)
    ones = F.pad(ones, (r, r, r, r))
    mask = torch.stack([ones[0, 0, dm : dm + h, dn : dn + w] for dm in range(k) for dn in range(k)]) > 0
    return logits, mask


def _masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=dim).masked_fill(~mask, 0.0)


def mutual_correlation(fj: torch.Tensor, fk: torch.Tensor, delta: int) -> torch.Tensor:
    """Windowed softmax correlation field between two ``(C, W, H)`` maps.

    Returns ``(W, H, K, K)`` where ``K = 2 * window_half_width(delta) + 1``:
    entry ``[x, y, a, b]`` is the probability assigned to ``fk`` at offset
    ``(a - r, b - r)`` from ``(x, y)``. Offsets falling outside the grid get 0;
    each position's probabilities sum to 1.
    """
    if fj.shape != fk.shape:
        raise ValueError(f"shape mismatch: {tuple(fj.shape)} vs {tuple(fk.shape)}")
    logits, mask = _window_logits(fj, fk, delta)
    field = _masked_softmax(logits, mask, dim=-3)
    k = 2 * window_half_width(delta) + 1
    return field.reshape(k, k, *field.shape[-2:]).permute(2, 3, 0, 1)


def _pair_mask(m: int, pairs: str, device) -> torch.Tensor:
    mask = ~torch.eye(m, dtype=torch.bool, device=device)
    if pairs == "anchor":
        mask[1:] = False
    return mask


def dcc_loss(
    source: Sequence[torch.Tensor],
    target: Sequence[torch.Tensor],
    config: StructuralLossConfig = StructuralLossConfig(),
    group_size: int | None = None,
) -> torch.Tensor:
    """L1 between windowed mutual-correlation fields of source and target.

    The batch dimension of every layer holds disturbance batches of
    ``group_size`` codes each (anchor first); by default the whole batch is
    one group. Summed over layers up to ``config.dcc_max_res``, ordered pairs,
    positions and window entries; averaged over groups.
    """
    _check_aligned(source, target)
    total = source[0].new_zeros(())
    for s, t in zip(source, target):
        b, c, h, w = s.shape
        if max(h, w) > config.dcc_max_res:
            continue
        m = group_size or b
        if b % m:
            raise ValueError(f"batch of {b} is not a whole number of groups of {m}")
        delta = config.window_for(w)
        if window_half_width(delta) == 0:
            # single-entry windows: both fields are identically 1
            continue
        pair_mask = _pair_mask(m, config.pairs, s.device)
        fields = []
        for f in (s, t):
            g = f.reshape(b // m, m, c, h, w)
            logits, mask = _window_logits(g[:, :, None], g[:, None, :], delta)
            fields.append(_masked_softmax(logits, mask, dim=-3))
        diff = (fields[1] - fields[0]).abs() * pair_mask[None, :, :, None, None, None]
        total = total + diff.flatten(1).sum(1).mean()
    return total


@dataclass
class StructuralTerms:
    scc: torch.Tensor
    dcc: torch.Tensor
    total: torch.Tensor

    @classmethod
    def combine(cls, scc, dcc, config: StructuralLossConfig) -> StructuralTerms:
        return cls(scc=scc, dcc=dcc, total=config.alpha * scc + config.beta * dcc)


def structural_loss(
    source: Sequence[torch.Tensor],
    target: Sequence[torch.Tensor],
    config: StructuralLossConfig = StructuralLossConfig(),
    group_size: int | None = None,
) -> StructuralTerms:
    """``alpha * scc + beta * dcc`` over one batch's source/target feature stacks.

    A zero weight skips its term entirely.
    """
    zero = source[0].new_zeros(())
    scc = scc_loss(source, target, config) if config.alpha else zero
    dcc = dcc_loss(source, target, config, group_size) if config.beta else zero
    return StructuralTerms.combine(scc, dcc, config)


def sample_disturbance(z: torch.Tensor, radius: float, n: int, generator: torch.Generator | None = None,
                       seed: int | None = None) -> torch.Tensor:
    """Anchor plus ``n`` codes drawn uniformly from the open ball ``|x - z| < radius``.

    Returns ``(n + 1, d)`` with the anchor in row 0.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if n < 1:
        raise ValueError(f"need at least one neighbour, got {n}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    d = z.shape[-1]
    out = torch.empty(n, d, dtype=z.dtype)
    todo = torch.arange(n)
    while len(todo):
        direction = torch.randn(len(todo), d, generator=generator, dtype=torch.float64)
        direction = direction / direction.norm(dim=1, keepdim=True).clamp_min(EPS)
        u = torch.rand(len(todo), 1, generator=generator, dtype=torch.float64)
        cand = z[None].to(torch.float64) + direction * (radius * u.pow(1.0 / d))
        cand = cand.to(z.dtype)
        # rounding can land a draw on the boundary; redraw those to keep the ball open
        ok = (cand.to(torch.float64) - z[None].to(torch.float64)).norm(dim=1) < radius
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
    return torch.cat([z[None], out], dim=0)
