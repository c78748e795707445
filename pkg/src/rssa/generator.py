"""Toy style-based generator and two-headed discriminator.

The generator follows the StyleGAN layout at a scale that trains on one CPU
core: a 3-layer mapping network produces a style vector that is broadcast to
``num_layers`` injection points (two modulated 3x3 convolutions per
resolution stage, 4 -> 8 -> 16 -> 32). A single forward pass returns both the
image and the post-activation output of every stage, which is what the
structural losses consume.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    resolution: int = 32
    img_channels: int = 3
    channels: dict[int, int] = field(default_factory=lambda: {4: 64, 8: 32, 16: 16, 32: 16})
    mapping_layers: int = 3

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        n = int(math.log2(self.resolution)) - 1
        return tuple(4 * 2**i for i in range(n))

    @property
    def num_layers(self) -> int:
        return 2 * len(self.stage_resolutions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        d = dict(d)
        d["channels"] = {int(k): int(v) for k, v in d["channels"].items()}
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    resolution: int = 32
    img_channels: int = 3
    channels: dict[int, int] = field(default_factory=lambda: {32: 16, 16: 16, 8: 32, 4: 64})
    patch_resolution: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DiscriminatorConfig:
        d = dict(d)
        d["channels"] = {int(k): int(v) for k, v in d["channels"].items()}
        return cls(**d)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite values")


def sample_latent(count: int, seed: int, dim: int = 64) -> torch.Tensor:
    """Draw ``count`` standard-normal latent codes, deterministically from ``seed``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(count, dim, generator=gen)


class EqualLinear(nn.Module):
    """Linear layer with weights stored at unit variance and scaled at run time.

    Adam then takes steps of the same relative size in every layer; ``lr_mul``
    slows a layer down (the mapping network uses 0.01).
    """

    def __init__(self, in_dim: int, out_dim: int, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init) / lr_mul))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


def _lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class MappingNetwork(nn.Module):
    def __init__(self, z_dim: int, w_dim: int, num_layers: int = 3, lr_mul: float = 0.01):
        super().__init__()
        dims = [z_dim] + [w_dim] * num_layers
        self.layers = nn.ModuleList(EqualLinear(a, b, lr_mul=lr_mul) for a, b in zip(dims, dims[1:]))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # pixel norm keeps the prior's scale out of the first layer
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = _lrelu(layer(x))
        return x


class ModulatedConv(nn.Module):
    """3x3 convolution whose input channels are scaled by a style, then demodulated."""

    def __init__(self, in_ch: int, out_ch: int, w_dim: int, kernel: int = 3):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = EqualLinear(w_dim, in_ch, bias_init=1.0)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        style = self.affine(w)  # (b, in_ch)
        # unfused form: scale inputs, shared conv, per-sample demodulation
        demod = torch.rsqrt((self.weight.pow(2).sum(dim=(2, 3))[None] * style.pow(2)[:, None, :]).sum(dim=2) + 1e-8)
        out = F.conv2d(x * style[:, :, None, None], self.weight, padding=self.kernel // 2)
        out = out * demod[:, :, None, None] + self.bias[None, :, None, None]
        return _lrelu(out)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        res = cfg.stage_resolutions
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers)
        self.const = nn.Parameter(torch.randn(1, cfg.channels[res[0]], res[0], res[0]))
        convs = []
        in_ch = cfg.channels[res[0]]
        for r in res:
            out_ch = cfg.channels[r]
            convs.append(ModulatedConv(in_ch, out_ch, cfg.w_dim))
            convs.append(ModulatedConv(out_ch, out_ch, cfg.w_dim))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.to_rgb = EqualConv2d(in_ch, cfg.img_channels, 1)

    @property
    def num_layers(self) -> int:
        return self.cfg.num_layers

    def map(self, z: torch.Tensor) -> torch.Tensor:
        """Map latents ``(B, z_dim)`` to a layered style stack ``(B, L, w_dim)``."""
        _check_finite(z, "latent code")
        w = self.mapping(z)
        return w[:, None, :].expand(-1, self.num_layers, -1).clone()

    def synthesize(self, styles: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Render ``(B, L, w_dim)`` styles; returns the image and per-stage feature maps."""
        if styles.dim() != 3 or styles.shape[1] != self.num_layers:
            raise ValueError(
                f"style stack must have shape (B, {self.num_layers}, w_dim), got {tuple(styles.shape)}"
            )
        x = self.const.expand(styles.shape[0], -1, -1, -1)
        features = []
        for i, conv in enumerate(self.convs):
            if i % 2 == 0 and i > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = conv(x, styles[:, i])
            if i % 2 == 1:
                features.append(x)
        img = torch.tanh(self.to_rgb(x))
        return img, features

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.synthesize(self.map(z))[0]


class Discriminator(nn.Module):
    """Conv trunk down to ``patch_resolution`` with an image head and a patch head."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        res = cfg.resolution
        self.from_rgb = EqualConv2d(cfg.img_channels, cfg.channels[res], 1)
        blocks = []
        while res > cfg.patch_resolution:
            blocks.append(EqualConv2d(cfg.channels[res], cfg.channels[res // 2], 3))
            res //= 2
        self.blocks = nn.ModuleList(blocks)
        c = cfg.channels[res]
        self.trunk_out = EqualConv2d(c, c, 3)
        self.image_head = nn.Sequential(nn.Flatten(), EqualLinear(c * res * res, c), nn.LeakyReLU(0.2), EqualLinear(c, 1))
        self.patch_head = EqualConv2d(c, 1, 1)

    def trunk(self, img: torch.Tensor) -> torch.Tensor:
        x = _lrelu(self.from_rgb(img))
        for block in self.blocks:
            x = _lrelu(block(x))
            x = F.avg_pool2d(x, 2)
        return _lrelu(self.trunk_out(x))

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        expected = (self.cfg.img_channels, self.cfg.resolution, self.cfg.resolution)
        if img.dim() != 4 or tuple(img.shape[1:]) != expected:
            raise ValueError(f"expected images of shape (B, {expected}), got {tuple(img.shape)}")
        h = self.trunk(img)
        return self.image_head(h).squeeze(1), self.patch_head(h).squeeze(1)


def map_latent(model: Generator, z: torch.Tensor) -> torch.Tensor:
    """Single-code or batched wrapper around :meth:`Generator.map`."""
    single = z.dim() == 1
    styles = model.map(z[None] if single else z)
    return styles[0] if single else styles


def synthesize(model: Generator, styles: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    single = styles.dim() == 2
    img, feats = model.synthesize(styles[None] if single else styles)
    if single:
        return img[0], [f[0] for f in feats]
    return img, feats


def discriminate(model: Discriminator, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    single = image.dim() == 3
    img_logit, patch_logits = model(image[None] if single else image)
    if single:
        return img_logit[0], patch_logits[0]
    return img_logit, patch_logits


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_copy(model: nn.Module) -> nn.Module:
    import copy

    clone = copy.deepcopy(model)
    clone.requires_grad_(False)
    clone.eval()
    return clone
