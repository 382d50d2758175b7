import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matgen.conditioning import ConditionSet, collate, extract_conditions
from matgen.diffusion import (
    Denoiser, NoiseSchedule, SamplerConfig, UNetConfig, ddim_chain, ddim_sigma, ddim_step,
    ddim_timesteps, diffusion_loss, iterate_forward, posterior_variance, q_sample, sample,
)
from matgen.vq import VQConfig, VQModel

SCHED = NoiseSchedule()


class Oracle(torch.nn.Module):
    """Recovers the injected noise exactly from a known clean latent."""

    def __init__(self, z0, schedule=SCHED):
        super().__init__()
        self.z0, self.schedule = z0, schedule

    def forward(self, z_t, t, cond=None):
        ab = self.schedule.alpha_bar_tensor(t).view(-1, 1, 1, 1)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class Zero(torch.nn.Module):
    def __init__(self, schedule=SCHED):
        super().__init__()
        self.schedule = schedule

    def forward(self, z_t, t, cond=None):
        return torch.zeros_like(z_t)


@pytest.fixture(scope="module")
def small_net():
    torch.manual_seed(0)
    cfg = UNetConfig(latent_channels=16, local_channels=8, widths=(16, 32), context_dim=16,
                     temb_dim=16, heads=2)
    return Denoiser(cfg, NoiseSchedule(), downsample=8)


@pytest.fixture(scope="module")
def small_vq():
    return VQModel(VQConfig(widths=(8, 8, 8), codebook_size=64))


def test_schedule_sanity():
    assert np.all(np.diff(SCHED.betas) > 0)
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bar(SCHED.steps) < 0.01
    assert SCHED.alpha_bar(SCHED.steps) < 5e-5
    assert SCHED.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.02, beta_end=0.01)
    with pytest.raises(ValueError):
        SCHED.beta(0)


def test_q_sample_limits():
    z0 = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    zero = torch.zeros_like(z0)
    assert torch.equal(q_sample(SCHED, z0, 300, zero), math.sqrt(SCHED.alpha_bar(300)) * z0)
    no_noise = NoiseSchedule(steps=10, beta_start=1e-12, beta_end=2e-12)
    assert torch.allclose(q_sample(no_noise, z0, 1, torch.randn_like(z0)), z0, atol=1e-5)
    with pytest.raises(ValueError):
        q_sample(SCHED, z0, 1001, zero)
    with pytest.raises(ValueError):
        q_sample(SCHED, z0, 5, torch.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 1000))
def test_q_sample_linearity(a, t):
    g = torch.Generator().manual_seed(t)
    z0 = torch.randn(2, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, generator=g, dtype=torch.float64)
    assert torch.allclose(q_sample(SCHED, a * z0, t, a * eps), a * q_sample(SCHED, z0, t, eps),
                          rtol=1e-12, atol=1e-12)


def test_q_sample_monte_carlo_moments():
    g = torch.Generator().manual_seed(1)
    z0 = torch.tensor([0.7, -1.3], dtype=torch.float64)
    n, t = 10_000, 400
    zt = q_sample(SCHED, z0.expand(n, 2), t, torch.randn(n, 2, generator=g, dtype=torch.float64))
    ab = SCHED.alpha_bar(t)
    se_mean = math.sqrt((1 - ab) / n)
    assert torch.all((zt.mean(0) - math.sqrt(ab) * z0).abs() < 3 * se_mean)
    se_var = (1 - ab) * math.sqrt(2 / (n - 1))
    assert torch.all((zt.var(0) - (1 - ab)).abs() < 3 * se_var)


def test_iterate_forward_single_step():
    z0 = torch.randn(3, dtype=torch.float64)
    g1, g2 = torch.Generator().manual_seed(9), torch.Generator().manual_seed(9)
    eps = torch.randn(3, generator=g2, dtype=torch.float64)
    b = SCHED.beta(1)
    assert torch.equal(iterate_forward(SCHED, z0, 1, g1), math.sqrt(1 - b) * z0 + math.sqrt(b) * eps)


def test_iterate_forward_variance_accumulates():
    g = torch.Generator().manual_seed(2)
    z = iterate_forward(SCHED, torch.zeros(4000, dtype=torch.float64), 1000, g)
    assert abs(float(z.var()) - (1 - SCHED.alpha_bar(1000))) < 0.07


def test_loss_oracles():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 16, 4, 4, dtype=torch.float64)
    assert float(diffusion_loss(Oracle(z0), z0, None, g)) < 1e-20
    big = torch.randn(256, 16, 4, 4, dtype=torch.float64)
    assert abs(float(diffusion_loss(Zero(), big, None, g)) - 1.0) < 0.03


def test_loss_ignores_fully_dropped_conditions(small_net):
    rng = np.random.default_rng(0)
    a = extract_conditions(rng.uniform(size=(32, 32, 3)))
    b = extract_conditions(rng.uniform(size=(32, 32, 3)))
    mask = (True,) * 4
    ca = collate([ConditionSet(a.embedding, a.palette, a.sketch, a.render, mask)], 32)
    cb = collate([ConditionSet(b.embedding, b.palette, b.sketch, b.render, mask)], 32)
    z0 = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    t = torch.tensor([500])
    noise = torch.randn_like(z0)
    with torch.no_grad():
        la = diffusion_loss(small_net, z0, ca, None, t=t, noise=noise)
        lb = diffusion_loss(small_net, z0, cb, None, t=t, noise=noise)
        ln = diffusion_loss(small_net, z0, None, None, t=t, noise=noise)
    assert float(la) == float(lb) == float(ln)


def test_denoiser_shape_invariance(small_net):
    z = torch.randn(2, 16, 4, 4, dtype=torch.float64)
    t = torch.tensor([10, 900])
    conds = extract_conditions(np.random.default_rng(1).uniform(size=(32, 32, 3)))
    with torch.no_grad():
        for mask in [(False,) * 4, (True,) * 4, (True, False, True, False)]:
            c = ConditionSet(conds.embedding, conds.palette, conds.sketch, conds.render, mask)
            assert small_net(z, t, collate([c, c], 32)).shape == z.shape


def test_ddim_zero_net_scaling():
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    out = ddim_step(Zero(), z, 500, 400, 0.0, None)
    expected = math.sqrt(SCHED.alpha_bar(400) / SCHED.alpha_bar(500)) * z
    assert torch.allclose(out, expected, rtol=1e-14, atol=0)
    with pytest.raises(ValueError):
        ddim_step(Zero(), z, 400, 400, 0.0, None)


def test_ddim_deterministic_chain(small_net):
    z_T = torch.randn(1, 16, 4, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    cfg = SamplerConfig(steps=10)
    assert torch.equal(ddim_chain(small_net, z_T, cfg, None), ddim_chain(small_net, z_T, cfg, None))


@pytest.mark.parametrize("t", [2, 57, 333, 640, 999])
def test_eta_one_matches_ancestral_variance(t):
    assert abs(ddim_sigma(SCHED, t, t - 1, 1.0) ** 2 - posterior_variance(SCHED, t)) < 1e-10


def test_timesteps():
    ts = ddim_timesteps(1000, 100)
    assert len(ts) == 100 and ts[0] == 1000 and ts[-1] >= 1
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert ddim_timesteps(1000, 1000) == list(range(1000, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(1000, 1001)


def test_sample_lands_in_codebooks(small_net, small_vq):
    cfg = SamplerConfig(steps=5, seed=4)
    z = sample(small_net, None, cfg, small_vq, (2, 16, 4, 4))
    for s, book in zip(small_vq.slices, small_vq.codebooks):
        vecs = z[:, s].permute(0, 2, 3, 1).reshape(-1, book.dim)
        assert all(any(torch.equal(v, e) for e in book.weight.detach()) for v in vecs)
    assert torch.equal(z, sample(small_net, None, cfg, small_vq, (2, 16, 4, 4)))


def test_different_seeds_differ(small_net, small_vq):
    shape = (1, 16, 4, 4)
    outs = [sample(small_net, None, SamplerConfig(steps=5, seed=s), small_vq, shape) for s in range(10)]
    pairs = [(outs[i], outs[i + 1]) for i in range(0, 10, 2)]
    assert all(not torch.equal(a, b) for a, b in pairs)
