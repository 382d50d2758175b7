"""Multi-encoder VQ autoencoder over the four SVBRDF maps.

Each map gets its own convolutional encoder and codebook; the quantized latents
are concatenated channel-wise and decoded jointly. A single-encoder variant
(all twelve channels through one encoder and one codebook) is kept for the
architecture ablation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from matgen.material import MAP_NAMES, MaterialMaps
from matgen.ndmath import DTYPE
from matgen.renderer import LightingSet, render_loss

MAPS_PER_MATERIAL = len(MAP_NAMES)


@dataclass
class VQConfig:
    mode: str = "multi"  # "multi" | "single"
    codebook_size: int = 256  # total entries across all books
    latent_channels: int = 4  # per map; single mode uses 4x this in one book
    widths: tuple[int, ...] = (32, 64, 128)
    disc_widths: tuple[int, ...] = (32, 64)
    dead_after: int = 200
    seed: int = 0

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def total_channels(self) -> int:
        return self.latent_channels * MAPS_PER_MATERIAL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VQConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["disc_widths"] = tuple(d["disc_widths"])
        return cls(**d)


def codebook_mode(config: VQConfig) -> list[tuple[int, int]]:
    """Books as (entries, dim) pairs for the configured mode."""
    v = config.codebook_size
    if v < 2 or v & (v - 1):
        raise ValueError(f"codebook size must be a power of two >= 2, got {v}")
    if config.mode == "multi":
        if v < MAPS_PER_MATERIAL:
            raise ValueError(f"multi-encoder mode needs at least 4 entries, got {v}")
        return [(v // MAPS_PER_MATERIAL, config.latent_channels)] * MAPS_PER_MATERIAL
    if config.mode == "single":
        return [(v, config.total_channels)]
    raise ValueError(f"unknown codebook mode {config.mode!r}")


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4, channels)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = group_norm(cout)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class Encoder(nn.Module):
    """Stride-2 stages, one per width; output has ``out_channels`` at H/2^len(widths)."""

    def __init__(self, in_channels: int, out_channels: int, widths=(32, 64, 128)):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        stages = []
        cin = widths[0]
        for w in widths:
            stages.append(nn.Sequential(ConvBlock(cin, w), nn.Conv2d(w, w, 4, stride=2, padding=1)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Sequential(group_norm(cin), nn.SiLU(), nn.Conv2d(cin, out_channels, 1))

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.head(h)


class Decoder(nn.Module):
    """Nearest-neighbour x2 upsampling followed by conv, sigmoid output."""

    def __init__(self, in_channels: int, out_channels: int = 12, widths=(32, 64, 128)):
        super().__init__()
        rev = list(reversed(widths))
        self.stem = nn.Conv2d(in_channels, rev[0], 3, padding=1)
        stages = []
        cin = rev[0]
        for w in rev:
            stages.append(ConvBlock(cin, w))
            stages.append(nn.Upsample(scale_factor=2, mode="nearest"))
            stages.append(ConvBlock(w, w))
            cin = w
        self.body = nn.Sequential(*stages)
        self.out = nn.Conv2d(cin, out_channels, 3, padding=1)

    def forward(self, z):
        return torch.sigmoid(self.out(self.body(self.stem(z))))


class Codebook(nn.Module):
    def __init__(self, entries: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if entries < 2:
            raise ValueError("a codebook needs at least two entries")
        init = (torch.rand(entries, dim, generator=generator, dtype=DTYPE) * 2 - 1) / entries
        self.weight = nn.Parameter(init)
        self.register_buffer("usage", torch.zeros(entries, dtype=DTYPE))
        self.register_buffer("idle_steps", torch.zeros(entries, dtype=DTYPE))

    @property
    def entries(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def nearest(self, flat: torch.Tensor) -> torch.Tensor:
        """Index of the closest entry per row; ties go to the lowest index."""
        d = ((flat.detach()[:, None, :] - self.weight.detach()[None, :, :]) ** 2).sum(-1)
        return torch.argmin(d, dim=1)

    def record_usage(self, indices: torch.Tensor) -> None:
        counts = torch.bincount(indices.reshape(-1), minlength=self.entries).to(DTYPE)
        self.usage.copy_(counts)
        self.idle_steps.copy_(torch.where(counts > 0, torch.zeros_like(counts), self.idle_steps + 1))

    @torch.no_grad()
    def init_from(self, flat: torch.Tensor, generator: torch.Generator) -> None:
        """Data-dependent start: entries copied from distinct random encoder outputs."""
        n = flat.shape[0]
        if n >= self.entries:
            pick = torch.randperm(n, generator=generator)[: self.entries]
        else:
            pick = torch.randint(0, n, (self.entries,), generator=generator)
        self.weight.copy_(flat.detach()[pick])

    @torch.no_grad()
    def reseed_dead(self, flat: torch.Tensor, dead_after: int, generator: torch.Generator) -> int:
        """Move entries idle for ``dead_after`` steps onto random encoder outputs."""
        dead = torch.nonzero(self.idle_steps >= dead_after).reshape(-1)
        if dead.numel() == 0 or flat.shape[0] == 0:
            return 0
        pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=generator)
        self.weight[dead] = flat.detach()[pick]
        self.idle_steps[dead] = 0
        return int(dead.numel())


@dataclass
class Quantized:
    z_q: torch.Tensor  # straight-through output, (B, c, h, w)
    indices: torch.Tensor  # (B, h, w)
    loss_q: torch.Tensor
    loss_c: torch.Tensor


def quantize(z: torch.Tensor, book: Codebook) -> Quantized:
    """Snap each spatial vector of a (B, c, h, w) latent to its nearest entry."""
    if z.shape[1] != book.dim:
        raise ValueError(f"latent has {z.shape[1]} channels, codebook entries have {book.dim}")
    b, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    idx = book.nearest(flat)
    e = book.weight[idx]
    loss_q = ((flat.detach() - e) ** 2).mean()
    loss_c = ((flat - e.detach()) ** 2).mean()
    # value is exactly e, gradient passes to flat unchanged
    z_q = e.detach() + (flat - flat.detach())
    z_q = z_q.reshape(b, h, w, c).permute(0, 3, 1, 2)
    return Quantized(z_q, idx.reshape(b, h, w), loss_q, loss_c)


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting one logit per overlapping patch."""

    def __init__(self, in_channels: int = 12, widths=(32, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_channels
        for i, w in enumerate(widths):
            layers.append(nn.Conv2d(cin, w, 4, stride=2, padding=1))
            if i > 0:
                layers.append(group_norm(w))
            layers.append(nn.SiLU())
            cin = w
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def discriminate(d: PatchDiscriminator, x: torch.Tensor | MaterialMaps) -> torch.Tensor:
    if isinstance(x, MaterialMaps):
        x = x.to_tensor()
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return d(x)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def adaptive_adversarial_weight(rec_loss: torch.Tensor, adv_loss: torch.Tensor,
                                last_layer: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Gradient-norm ratio at the decoder's last layer, detached.

    Scales the adversarial term so its pull on the output layer matches the
    reconstruction term's, whatever the current loss magnitudes.
    """
    g_rec = torch.autograd.grad(rec_loss, last_layer, retain_graph=True)[0]
    g_adv = torch.autograd.grad(adv_loss, last_layer, retain_graph=True)[0]
    return (g_rec.norm() / (g_adv.norm() + eps)).clamp(0.0, 1e4).detach()


class RandomFeatures(nn.Module):
    """Frozen random strided conv stack used as a feature-space distance."""

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        cin = 3
        for i, w in enumerate(widths):
            fan_in = cin * 9
            weight = torch.randn(w, cin, 3, 3, generator=g, dtype=DTYPE) / np.sqrt(fan_in)
            self.register_buffer(f"w{i}", weight)
            cin = w
        self.depth = len(widths)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        h = x
        for i in range(self.depth):
            h = F.conv2d(h, getattr(self, f"w{i}"), stride=2, padding=1)
            out.append(h)
            h = F.silu(h)
        return out

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-map L2 feature distance for (B, 12, H, W) stacks, averaged over maps and layers."""
        bsz = a.shape[0]
        fa = self.features(a.reshape(bsz * 4, 3, *a.shape[-2:]))
        fb = self.features(b.reshape(bsz * 4, 3, *b.shape[-2:]))
        return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb)) / len(fa)


class VQModel(nn.Module):
    def __init__(self, config: VQConfig):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        torch.manual_seed(config.seed)
        books = codebook_mode(config)
        c = config.latent_channels
        if config.mode == "multi":
            self.encoders = nn.ModuleList(Encoder(3, c, config.widths) for _ in range(MAPS_PER_MATERIAL))
        else:
            self.encoders = nn.ModuleList([Encoder(12, config.total_channels, config.widths)])
        self.codebooks = nn.ModuleList(Codebook(v, d, g) for v, d in books)
        self.decoder = Decoder(config.total_channels, 12, config.widths)
        self.to(DTYPE)

    @property
    def slices(self) -> list[slice]:
        """Channel ranges of the concatenated latent owned by each codebook."""
        out, start = [], 0
        for book in self.codebooks:
            out.append(slice(start, start + book.dim))
            start += book.dim
        return out

    def encode(self, x: torch.Tensor | MaterialMaps) -> list[torch.Tensor]:
        """Pre-quantization latents, one per codebook (four in multi mode)."""
        if isinstance(x, MaterialMaps):
            x = x.to_tensor()
        if x.ndim == 3:
            x = x.unsqueeze(0)
        f = self.config.downsample
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"resolution {tuple(x.shape[-2:])} not divisible by f={f}")
        if self.config.mode == "multi":
            return [enc(x[:, 3 * i : 3 * i + 3]) for i, enc in enumerate(self.encoders)]
        return [self.encoders[0](x)]

    def quantize(self, latents: list[torch.Tensor]) -> tuple[torch.Tensor, list[Quantized]]:
        qs = [quantize(z, book) for z, book in zip(latents, self.codebooks)]
        return torch.cat([q.z_q for q in qs], dim=1), qs

    def quantize_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Snap a concatenated latent to the codebooks (no gradients)."""
        with torch.no_grad():
            parts = [quantize(z[:, s], book).z_q for s, book in zip(self.slices, self.codebooks)]
        return torch.cat(parts, dim=1)

    def code_indices(self, z: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return [quantize(z[:, s], book).indices for s, book in zip(self.slices, self.codebooks)]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.config.total_channels:
            raise ValueError(f"latent has {z.shape[1]} channels, decoder expects "
                             f"{self.config.total_channels}")
        return self.decoder(z)

    def forward(self, x: torch.Tensor):
        z_q, qs = self.quantize(self.encode(x))
        return self.decode(z_q), qs

    def latents(self, x: torch.Tensor) -> torch.Tensor:
        """Quantized concatenated latent of a map stack, no gradients."""
        with torch.no_grad():
            return self.quantize(self.encode(x))[0]


@dataclass
class LossWeights:
    render: float = 0.9
    perceptual: float = 0.6
    adversarial: float = 0.1
    commitment: float = 0.25
    use_render: bool = True
    use_perceptual: bool = True
    use_adversarial: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    pixel: torch.Tensor
    render: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    q: torch.Tensor
    c: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("total", "pixel", "render", "perceptual", "adversarial", "q", "c")}


def compression_loss(
    maps: torch.Tensor,
    reconstruction: torch.Tensor,
    quantized: list[Quantized],
    weights: LossWeights,
    lights: LightingSet | None = None,
    features: RandomFeatures | None = None,
    discriminator: PatchDiscriminator | None = None,
    adversarial_active: bool = False,
) -> LossBreakdown:
    """Reconstruction + adversarial + codebook regularization, per term and total.

    ``maps`` and ``reconstruction`` are (B, 12, H, W) stacks.
    """
    if maps.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch: {tuple(maps.shape)} vs {tuple(reconstruction.shape)}")
    zero = reconstruction.new_zeros(())
    pixel = (maps - reconstruction).abs().mean()
    rend = zero
    if weights.use_render and weights.render > 0:
        if lights is None:
            raise ValueError("rendering loss needs a LightingSet")
        rend = render_loss(MaterialMaps.from_tensor(maps), MaterialMaps.from_tensor(reconstruction), lights)
    perc = zero
    if weights.use_perceptual and weights.perceptual > 0:
        perc = (features or RandomFeatures()).distance(maps, reconstruction)
    adv = zero
    if weights.use_adversarial and adversarial_active and discriminator is not None:
        adv = hinge_g_loss(discriminator(reconstruction))
    lq = sum((q.loss_q for q in quantized), zero)
    lc = sum((q.loss_c for q in quantized), zero)
    total = pixel + weights.render * rend + weights.perceptual * perc
    total = total + weights.adversarial * adv + lq + weights.commitment * lc
    return LossBreakdown(total, pixel, rend, perc, adv, lq, lc)
