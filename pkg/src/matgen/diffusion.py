"""Forward noising, the conditional epsilon-prediction U-Net and DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from matgen.conditioning import AttentionBlock, ConditionBatch, ConditionEncoder, cross_attend, null_batch
from matgen.ndmath import DTYPE


class NoiseSchedule:
    """Linear beta schedule; timesteps are 1-based and alpha_bar(0) = 1."""

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if not 0 < beta_start < beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor) -> torch.Tensor:
        table = torch.as_tensor(np.concatenate([[1.0], self.alpha_bars]), dtype=DTYPE)
        return table[t]

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside 1..{self.steps}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Closed-form z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` int or per-item tensor."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor):
        if t.min() < 1 or t.max() > schedule.steps:
            raise ValueError(f"timesteps must lie in 1..{schedule.steps}")
        ab = schedule.alpha_bar_tensor(t).to(z0.dtype).view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
    ab = schedule.alpha_bar(int(t))
    schedule._check(int(t))
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def iterate_forward(schedule: NoiseSchedule, z0: torch.Tensor, t: int,
                    generator: torch.Generator) -> torch.Tensor:
    """Apply the one-step Gaussian transition t times."""
    schedule._check(t)
    z = z0
    for s in range(1, t + 1):
        b = schedule.beta(s)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z = math.sqrt(1.0 - b) * z + math.sqrt(b) * eps
    return z


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    """beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)."""
    return schedule.beta(t) * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t, ab_p = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def ddim_timesteps(train_steps: int, steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing timesteps ending at 0 (exclusive of 0 in the list)."""
    if not 1 <= steps <= train_steps:
        raise ValueError(f"sampler steps must lie in 1..{train_steps}")
    grid = np.floor(np.linspace(train_steps, 0, steps + 1) + 0.5).astype(int)
    return [int(x) for x in grid[:-1]]


# -------------------------------------------------------------------- U-Net


def timestep_embedding(t: torch.Tensor, dim: int = 64) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def _grid(tokens: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(like.shape)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.norm = nn.GroupNorm(4, dim)
        self.attn = AttentionBlock(dim, dim, heads)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        h = _tokens(self.norm(x))
        return x + _grid(self.proj(self.attn.attend(h, h)), x)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.attn = AttentionBlock(dim, context_dim, heads)

    def forward(self, x, context):
        return _grid(cross_attend(self.attn, _tokens(x), context), x)


@dataclass
class UNetConfig:
    latent_channels: int = 16
    local_channels: int = 8
    widths: tuple[int, ...] = (64, 128)
    context_dim: int = 64
    temb_dim: int = 64
    heads: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class DenoiserUNet(nn.Module):
    """Levels at full latent resolution and below; self-attention at the bottleneck,
    cross-attention on the global context at every level."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        t4 = 2 * cfg.temb_dim
        self.time = nn.Sequential(nn.Linear(cfg.temb_dim, t4), nn.SiLU(), nn.Linear(t4, t4))
        self.conv_in = nn.Conv2d(cfg.latent_channels + cfg.local_channels, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.down_cross = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = w[0]
        for i, width in enumerate(w):
            self.down.append(ResBlock(cin, width, t4))
            self.down_cross.append(CrossAttention(width, cfg.context_dim, cfg.heads))
            cin = width
            if i < len(w) - 1:
                self.downsample.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
        self.mid_self = SelfAttention(cin, cfg.heads)
        self.mid_res = ResBlock(cin, cin, t4)
        self.upsample = nn.ModuleList()
        self.up = nn.ModuleList()
        self.up_cross = nn.ModuleList()
        for width in reversed(w[:-1]):
            self.upsample.append(nn.Conv2d(cin, cin, 3, padding=1))
            self.up.append(ResBlock(cin + width, width, t4))
            self.up_cross.append(CrossAttention(width, cfg.context_dim, cfg.heads))
            cin = width
        self.norm_out = nn.GroupNorm(4, cin)
        self.conv_out = nn.Conv2d(cin, cfg.latent_channels, 3, padding=1)

    def forward(self, x, t, context):
        temb = self.time(timestep_embedding(t, self.cfg.temb_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for i, (res, cross) in enumerate(zip(self.down, self.down_cross)):
            h = cross(res(h, temb), context)
            if i < len(self.downsample):
                skips.append(h)
                h = self.downsample[i](h)
        h = self.mid_res(self.mid_self(h), temb)
        for up, res, cross in zip(self.upsample, self.up, self.up_cross):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = cross(res(torch.cat([h, skips.pop()], dim=1), temb), context)
        return self.conv_out(F.silu(self.norm_out(h)))


class Denoiser(nn.Module):
    """U-Net plus condition encoder; predicts the injected noise."""

    def __init__(self, unet_cfg: UNetConfig, schedule: NoiseSchedule, downsample: int = 8):
        super().__init__()
        self.schedule = schedule
        self.downsample = downsample
        self.unet = DenoiserUNet(unet_cfg)
        self.conditions = ConditionEncoder(unet_cfg.context_dim, downsample, unet_cfg.local_channels // 2)
        self.register_buffer("latent_scale", torch.ones((), dtype=DTYPE))
        self.to(DTYPE)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: ConditionBatch | None = None):
        if cond is None:
            cond = null_batch(z_t.shape[0], z_t.shape[-1] * self.downsample, z_t.dtype)
        context, local = self.conditions(cond)
        return self.unet(torch.cat([z_t, local], dim=1), t, context)


@dataclass
class SamplerConfig:
    steps: int = 100
    eta: float = 0.0
    seed: int = 0


def diffusion_loss(net, z0: torch.Tensor, cond: ConditionBatch | None, generator: torch.Generator,
                   t: torch.Tensor | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise at random timesteps."""
    schedule = net.schedule
    b = z0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.steps + 1, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(schedule, z0, t, noise)
    return ((noise - net(z_t, t, cond)) ** 2).mean()


def ddim_step(net, z_t: torch.Tensor, t: int, t_prev: int, eta: float,
              cond: ConditionBatch | None, generator: torch.Generator | None = None) -> torch.Tensor:
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    schedule = net.schedule
    ab_t, ab_p = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    tt = torch.full((z_t.shape[0],), t, dtype=torch.long)
    eps = net(z_t, tt, cond)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    out = math.sqrt(ab_p) * z0_hat + math.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return out


@torch.no_grad()
def ddim_chain(net, z_T: torch.Tensor, sampler: SamplerConfig, cond: ConditionBatch | None,
               generator: torch.Generator | None = None) -> torch.Tensor:
    ts = ddim_timesteps(net.schedule.steps, sampler.steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        z = ddim_step(net, z, t, t_prev, sampler.eta, cond, generator)
    return z


@torch.no_grad()
def sample(net: Denoiser, cond: ConditionBatch | None, sampler: SamplerConfig, vq,
           shape: tuple[int, ...]) -> torch.Tensor:
    """DDIM from pure noise, unscale, then snap every latent vector to its codebook."""
    g = torch.Generator().manual_seed(sampler.seed)
    dtype = next(net.parameters()).dtype
    z_T = torch.randn(shape, generator=g, dtype=dtype)
    z = ddim_chain(net, z_T, sampler, cond, g)
    z = z / net.latent_scale.to(dtype)
    return vq.quantize_latent(z.to(next(vq.parameters()).dtype))
