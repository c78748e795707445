"""Adversarial losses and lazy regularizers.

Both discriminator heads use the non-saturating logistic loss in its
softplus form, so no probability is ever passed through a raw ``log``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AdversarialConfig:
    image_weight: float = 1.0
    patch_weight: float = 1.0
    r1_gamma: float = 10.0
    r1_interval: int = 16
    pl_weight: float = 2.0
    pl_interval: int = 8
    pl_decay: float = 0.99

    def __post_init__(self):
        for name in ("image_weight", "patch_weight", "r1_gamma", "pl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.r1_interval < 1 or self.pl_interval < 1:
            raise ValueError("regularization intervals must be >= 1")
        if not 0.0 <= self.pl_decay < 1.0:
            raise ValueError("pl_decay must lie in [0, 1)")


def _weighted(img_term: torch.Tensor, patch_term: torch.Tensor, cfg: AdversarialConfig) -> torch.Tensor:
    return cfg.image_weight * img_term.mean() + cfg.patch_weight * patch_term.mean()


def generator_logit_loss(img_logit, patch_logits, cfg: AdversarialConfig = AdversarialConfig()) -> torch.Tensor:
    """``-log sigmoid(logit)`` on both heads; the patch head is averaged over its grid."""
    return _weighted(F.softplus(-img_logit), F.softplus(-patch_logits), cfg)


def discriminator_logit_loss(real_img, real_patch, fake_img, fake_patch,
                             cfg: AdversarialConfig = AdversarialConfig()) -> torch.Tensor:
    real = _weighted(F.softplus(-real_img), F.softplus(-real_patch), cfg)
    fake = _weighted(F.softplus(fake_img), F.softplus(fake_patch), cfg)
    return real + fake


def generator_adv_loss(D, fake_images: torch.Tensor, cfg: AdversarialConfig = AdversarialConfig()) -> torch.Tensor:
    if fake_images.shape[0] == 0:
        raise ValueError("empty fake batch")
    return generator_logit_loss(*D(fake_images), cfg)


def discriminator_adv_loss(D, real_images: torch.Tensor, fake_images: torch.Tensor,
                           cfg: AdversarialConfig = AdversarialConfig()) -> torch.Tensor:
    """Pushes real logits up and fake logits down on both heads."""
    if real_images.shape[0] == 0 or fake_images.shape[0] == 0:
        raise ValueError("empty real or fake batch")
    return discriminator_logit_loss(*D(real_images), *D(fake_images), cfg)


def r1_penalty(D, real_images: torch.Tensor, gamma: float = 10.0, create_graph: bool = True) -> torch.Tensor:
    """``gamma / 2 * E ||grad_x D_img(x)||^2`` over the real batch."""
    if real_images.shape[0] == 0:
        raise ValueError("empty real batch")
    x = real_images.detach().requires_grad_(True)
    img_logit = D(x)[0]
    if not img_logit.requires_grad:
        return img_logit.new_zeros(())
    (grad,) = torch.autograd.grad(img_logit.sum(), x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return img_logit.new_zeros(())
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


class PathLengthRegularizer:
    """Keeps ``||J_w^T y||`` near its exponential running mean.

    ``y`` is standard-normal, image-shaped noise and the product is taken per
    pixel (``<img, y> / sqrt(H W)``). The length of a sample is the root-mean
    over layers of the squared norm of its per-layer gradient.
    """

    def __init__(self, decay: float = 0.99, mean: float = 0.0):
        self.decay = decay
        self.mean = mean

    def lengths(self, G, styles: torch.Tensor, noise: torch.Tensor | None = None,
                generator: torch.Generator | None = None, create_graph: bool = True) -> torch.Tensor:
        styles = styles.detach().requires_grad_(True)
        img, _ = G.synthesize(styles)
        if noise is None:
            noise = torch.randn(img.shape, generator=generator, dtype=img.dtype)
        # dividing by sqrt(H * W) keeps the length independent of image size
        pixels = math.sqrt(img.shape[-1] * img.shape[-2])
        (grad,) = torch.autograd.grad((img * noise).sum() / pixels, styles, create_graph=create_graph)
        return grad.pow(2).sum(-1).mean(-1).add(1e-12).sqrt()

    def __call__(self, G, styles: torch.Tensor, noise: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> torch.Tensor:
        if styles.shape[0] == 0:
            raise ValueError("empty style batch")
        lengths = self.lengths(G, styles, noise, generator)
        batch_mean = float(lengths.detach().mean())
        if not math.isfinite(batch_mean):
            raise FloatingPointError("non-finite path length")
        self.mean = self.decay * self.mean + (1.0 - self.decay) * batch_mean
        return (lengths - self.mean).pow(2).mean()

    def state_dict(self) -> dict:
        return {"decay": self.decay, "mean": self.mean}

    def load_state_dict(self, state: dict) -> None:
        self.decay = float(state["decay"])
        self.mean = float(state["mean"])
