import math

import pytest
import torch
import torch.nn as nn

from rssa.adversarial import (
    AdversarialConfig,
    PathLengthRegularizer,
    discriminator_adv_loss,
    discriminator_logit_loss,
    generator_adv_loss,
    generator_logit_loss,
    r1_penalty,
)
from rssa.generator import Discriminator, DiscriminatorConfig


class ConstantD(nn.Module):
    """Returns fixed logits on both heads regardless of input."""

    def __init__(self, img=0.0, patch=0.0):
        super().__init__()
        self.img, self.patch = img, patch

    def forward(self, x):
        b = x.shape[0]
        return torch.full((b,), self.img, dtype=x.dtype), torch.full((b, 4, 4), self.patch, dtype=x.dtype)


class LinearD(nn.Module):
    def __init__(self, a):
        super().__init__()
        self.a = a

    def forward(self, x):
        img = (x.flatten(1) * self.a.flatten()).sum(1)
        return img, img[:, None, None].expand(-1, 4, 4)


class LinearG:
    """Frozen linear synthesis: image = M @ flattened styles."""

    def __init__(self, layers=3, w_dim=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.shape = (3, 2, 2)
        self.M = torch.randn(12, layers * w_dim, generator=g, dtype=torch.float64)

    def synthesize(self, styles):
        img = (styles.flatten(1) @ self.M.T).reshape(-1, *self.shape)
        return img, []


def test_certain_real_gives_zero_generator_loss():
    fake = torch.zeros(2, 3, 32, 32)
    assert generator_adv_loss(ConstantD(math.inf, math.inf), fake).item() == 0.0


def test_zero_logits_generator_loss():
    cfg = AdversarialConfig(image_weight=1.0, patch_weight=0.5)
    loss = generator_adv_loss(ConstantD(), torch.zeros(2, 3, 32, 32), cfg)
    assert loss.item() == pytest.approx(math.log(2) * 1.5)


def test_generator_loss_decreasing_in_logit():
    vals = [generator_logit_loss(torch.tensor([float(x)]), torch.full((1, 4, 4), float(x))).item() for x in range(-5, 6)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_generator_loss_finite_for_extreme_logits():
    for x in (-1e4, 1e4):
        assert math.isfinite(generator_logit_loss(torch.tensor([x]), torch.full((1, 4, 4), x)).item())


def test_discriminator_separated_logits():
    loss = discriminator_logit_loss(
        torch.full((4,), 20.0), torch.full((4, 4, 4), 20.0), torch.full((4,), -20.0), torch.full((4, 4, 4), -20.0)
    )
    # 4 * softplus(-20) ~ 1.6e-8
    assert loss.item() < 1e-6


def test_discriminator_zero_logits():
    x = torch.zeros(2, 3, 32, 32)
    cfg = AdversarialConfig()
    assert discriminator_adv_loss(ConstantD(), x, x, cfg).item() == pytest.approx(2 * math.log(2) * 2)


def test_swapping_batches_flips_logit_gradients():
    real = torch.tensor([0.3, -0.2], requires_grad=True)
    fake = torch.tensor([0.1, 0.4], requires_grad=True)
    rp = torch.zeros(2, 4, 4, requires_grad=True)
    fp = torch.zeros(2, 4, 4, requires_grad=True)
    discriminator_logit_loss(real, rp, fake, fp).backward()
    assert (real.grad < 0).all() and (fake.grad > 0).all()
    real2 = real.detach().clone().requires_grad_(True)
    fake2 = fake.detach().clone().requires_grad_(True)
    discriminator_logit_loss(fake2, fp.detach(), real2, rp.detach()).backward()
    assert (real2.grad > 0).all() and (fake2.grad < 0).all()


def test_empty_batches_rejected():
    with pytest.raises(ValueError):
        generator_adv_loss(ConstantD(), torch.zeros(0, 3, 32, 32))
    with pytest.raises(ValueError):
        r1_penalty(ConstantD(), torch.zeros(0, 3, 32, 32))


def test_r1_constant_discriminator_is_zero():
    assert r1_penalty(ConstantD(1.0, 1.0), torch.randn(3, 3, 8, 8)).item() == 0.0


def test_r1_linear_discriminator_closed_form():
    a = torch.randn(3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    got = r1_penalty(LinearD(a), torch.randn(4, 3, 8, 8, dtype=torch.float64), gamma=10.0)
    assert got.item() == pytest.approx(5.0 * a.pow(2).sum().item(), rel=1e-12)


def test_r1_matches_finite_differences():
    torch.manual_seed(0)
    D = Discriminator(DiscriminatorConfig(resolution=8, channels={8: 8, 4: 16})).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    got = r1_penalty(D, x, gamma=10.0).item()
    h = 1e-4
    total = 0.0
    for b in range(2):
        flat = x[b].flatten()
        grad = torch.empty_like(flat)
        for i in range(flat.numel()):
            e = torch.zeros_like(flat)
            e[i] = h
            up = D((flat + e).reshape(1, 3, 8, 8))[0].item()
            dn = D((flat - e).reshape(1, 3, 8, 8))[0].item()
            grad[i] = (up - dn) / (2 * h)
        total += grad.pow(2).sum().item()
    fd = 5.0 * total / 2
    assert abs(got - fd) / fd < 1e-3


def test_r1_ignores_fake_images():
    torch.manual_seed(0)
    D = Discriminator()
    real = torch.randn(2, 3, 32, 32)
    # r1 has no fake argument; evaluating D on fakes in between must not change it
    before = r1_penalty(D, real).item()
    D(torch.randn(5, 3, 32, 32))
    assert r1_penalty(D, real).item() == before


def test_path_length_ema_update():
    G = LinearG()
    reg = PathLengthRegularizer(decay=0.99, mean=2.0)
    styles = torch.randn(4, 3, 4, dtype=torch.float64)
    noise = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    lengths = reg.lengths(G, styles, noise)
    reg(G, styles, noise)
    assert reg.mean == pytest.approx(0.99 * 2.0 + 0.01 * lengths.mean().item(), rel=1e-12)


def test_path_length_zero_at_mean():
    G = LinearG()
    styles = torch.randn(1, 3, 4, dtype=torch.float64)
    noise = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    length = PathLengthRegularizer().lengths(G, styles, noise).item()
    reg = PathLengthRegularizer(mean=length)
    assert reg(G, styles, noise).item() == pytest.approx(0.0, abs=1e-20)


def test_path_length_converges_for_linear_generator():
    G = LinearG()
    noise = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    reg = PathLengthRegularizer(decay=0.9)
    penalties = []
    for i in range(200):
        # a linear map's JVP does not depend on where it is evaluated
        styles = torch.randn(1, 3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(i))
        penalties.append(reg(G, styles, noise).item())
    assert all(b <= a for a, b in zip(penalties, penalties[1:]))
    assert penalties[-1] < 1e-12 * max(1.0, penalties[0])


def test_config_validation():
    with pytest.raises(ValueError):
        AdversarialConfig(r1_interval=0)
    with pytest.raises(ValueError):
        AdversarialConfig(patch_weight=-1)
