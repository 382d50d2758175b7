"""Finite-difference gradient suites for the differentiable pieces of the model.

Each suite compares autograd gradients with central differences, grouped by
parameter family, and reports the worst relative error per group. The VQ suite
checks the straight-through rule: its oracle differentiates a surrogate where
quantization is replaced by a frozen additive offset, which is exactly the
function the straight-through estimator claims to differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from matgen.conditioning import AttentionBlock, collate, cross_attend, extract_conditions
from matgen.diffusion import Denoiser, NoiseSchedule, UNetConfig, diffusion_loss
from matgen.material import MaterialMaps, encode_normals
from matgen.ndmath import DTYPE, relative_errors
from matgen.renderer import LightingSet, RenderConfig, render_loss, shading_terms
from matgen.vq import LossWeights, Quantized, RandomFeatures, VQConfig, VQModel, compression_loss

TARGETS = ("renderer", "vq", "attention", "unet")
TOLERANCE = 1e-4
KINK_MARGIN = 0.05
SMOOTH_EPS = 1e-4  # step for the five-point stencil on kink-free targets


@dataclass
class GradReport:
    target: str
    seed: int
    groups: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.groups.values())

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE

    def lines(self) -> list[str]:
        out = [f"{self.target} seed={self.seed} worst={self.worst:.3e} {'ok' if self.passed else 'FAIL'}"]
        out += [f"  {name:<24} {err:.3e}" for name, err in self.groups.items()]
        return out


class _ScaleGrad(torch.autograd.Function):
    """Identity forward, scaled backward; used to prove the harness catches bad gradients."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return g * ctx.factor, None


def _maybe_corrupt(loss: torch.Tensor, corrupt: bool) -> torch.Tensor:
    return _ScaleGrad.apply(loss, 1.01) if corrupt else loss


def compare(analytic_fn: Callable[[], torch.Tensor], oracle_fn: Callable[[], torch.Tensor],
            leaf: torch.Tensor, indices, eps: float = 1e-5, floor: float = 1e-8,
            stencil: int = 2) -> float:
    """Worst relative error on ``indices`` of ``leaf`` (perturbed in place).

    ``stencil=4`` uses the five-point formula, accurate to O(eps^4); it lets
    smooth targets take a larger step so tiny gradients are not lost to roundoff.
    """
    idx = np.asarray(list(indices), dtype=int)
    if idx.size == 0:
        return 0.0
    # a full backward pass rather than autograd.grad(..., leaf): the pruned
    # graph crashes torch's CPU backend for norm weights ahead of 1x1 attention
    saved, leaf.grad = leaf.grad, None
    analytic_fn().backward()
    g, leaf.grad = leaf.grad, saved
    analytic = np.zeros(leaf.numel()) if g is None else g.detach().reshape(-1).numpy().copy()
    flat = leaf.data.view(-1)
    numeric = np.zeros(idx.size)
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i].item()

            def at(step):
                flat[i] = orig + step
                return float(oracle_fn())

            if stencil == 4:
                numeric[j] = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
            else:
                numeric[j] = (at(eps) - at(-eps)) / (2.0 * eps)
            flat[i] = orig
    return float(relative_errors(analytic[idx], numeric, floor).max())


def _sample_indices(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(count, n), replace=False))


# ---------------------------------------------------------------- renderer


def random_maps(rng: np.random.Generator, resolution: int) -> MaterialMaps:
    shape = (resolution, resolution, 3)
    tilt = rng.normal(0.0, 0.3, (resolution, resolution, 2))
    n = np.concatenate([tilt, np.ones((resolution, resolution, 1))], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    rough = np.repeat(rng.uniform(0.2, 0.9, shape[:2] + (1,)), 3, axis=-1)
    spec = np.repeat(rng.uniform(0.02, 0.6, shape[:2] + (1,)), 3, axis=-1)
    return MaterialMaps(
        torch.tensor(rng.uniform(0.05, 0.95, shape), dtype=DTYPE),
        encode_normals(torch.tensor(n, dtype=DTYPE)),
        torch.tensor(rough, dtype=DTYPE),
        torch.tensor(spec, dtype=DTYPE),
    )


def smooth_pixels(maps: MaterialMaps, lights: LightingSet, margin: float = KINK_MARGIN) -> np.ndarray:
    """Pixels safely away from the n·l and n·v clamps for every light."""
    ok = torch.ones(maps.normal.shape[:-1], dtype=torch.bool)
    for cfg in lights:
        s = shading_terms(maps, cfg)
        ok &= (s["n_dot_l"][..., 0] >= margin) & (s["n_dot_v"][..., 0] >= margin)
    return ok.numpy()


def renderer_suite(seed: int, corrupt: bool = False, resolution: int = 8) -> GradReport:
    rng = np.random.default_rng([seed, 101])
    pred, ref = random_maps(rng, resolution), random_maps(rng, resolution)
    lights = LightingSet((
        RenderConfig((float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5)), 1.5)),
        RenderConfig((float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5)), 1.0),
                     camera_pos=(0.5, -0.3, 1.8)),
    ))
    x = pred.to_tensor().clone().contiguous().requires_grad_(True)  # (12, H, W)
    mask = smooth_pixels(pred, lights).reshape(-1)

    def loss():
        return render_loss(MaterialMaps.from_tensor(x), ref, lights)

    groups = {}
    pix = resolution * resolution
    for m, name in enumerate(("diffuse", "normal", "roughness", "specular")):
        idx = [c * pix + p for c in range(3 * m, 3 * m + 3) for p in range(pix) if mask[p]]
        groups[name] = compare(lambda: _maybe_corrupt(loss(), corrupt), loss, x, idx)
    return GradReport("renderer", seed, groups)


# ---------------------------------------------------------------------- vq


def vq_suite(seed: int, corrupt: bool = False, resolution: int = 16, count: int = 12,
             eps: float = 1e-6) -> GradReport:
    """The L1 terms make the loss piecewise smooth, so a smaller step keeps the
    central difference from straddling a kink; float64 roundoff stays ~1e-10."""
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 202])
    model = VQModel(VQConfig(mode="multi", codebook_size=32, latent_channels=4, widths=(8, 16), seed=seed))
    model.to(DTYPE)
    with torch.no_grad():
        # base point away from the zero-normal singularity: decoded normals lean to +z
        model.decoder.out.bias[5] += 3.0
    x = random_maps(rng, resolution).to_tensor().unsqueeze(0).clone().contiguous().requires_grad_(True)
    lights = LightingSet((RenderConfig((0.2, -0.1, 1.5)),))
    weights = LossWeights(use_adversarial=False)
    feats = RandomFeatures(widths=(4, 8, 8)).to(DTYPE)
    with torch.no_grad():
        frozen = []
        for z, book in zip(model.encode(x), model.codebooks):
            flat = z.permute(0, 2, 3, 1).reshape(-1, book.dim)
            idx = book.nearest(flat)
            frozen.append((idx, flat.clone(), book.weight[idx].clone(), z.shape))

    def real():
        rec, qs = model(x)
        return _maybe_corrupt(compression_loss(x, rec, qs, weights, lights, feats).total, corrupt)

    def surrogate():
        # quantization replaced by z + (e0 - z0) with assignments frozen at the base point
        parts, qs = [], []
        for z, book, (idx, z0, e0, shape) in zip(model.encode(x), model.codebooks, frozen):
            b, c, h, w = shape
            flat = z.permute(0, 2, 3, 1).reshape(-1, c)
            e = book.weight[idx]
            zq = (flat + (e0 - z0)).reshape(b, h, w, c).permute(0, 3, 1, 2)
            qs.append(Quantized(zq, idx, ((z0 - e) ** 2).mean(), ((flat - e0) ** 2).mean()))
            parts.append(zq)
        rec = model.decode(torch.cat(parts, dim=1))
        return compression_loss(x, rec, qs, weights, lights, feats).total

    groups = {"input": compare(real, surrogate, x, _sample_indices(rng, x.numel(), count), eps)}
    families = {
        "encoder": [p for p in model.encoders.parameters()],
        "codebook": [b.weight for b in model.codebooks],
        "decoder": [p for p in model.decoder.parameters()],
    }
    for name, params in families.items():
        worst = 0.0
        for k in rng.choice(len(params), size=min(3, len(params)), replace=False):
            p = params[int(k)]
            worst = max(worst, compare(real, surrogate, p, _sample_indices(rng, p.numel(), count // 3 + 1), eps))
        groups[name] = worst
    return GradReport("vq", seed, groups)


# --------------------------------------------------------------- attention


def attention_suite(seed: int, corrupt: bool = False) -> GradReport:
    torch.manual_seed(seed)
    block = AttentionBlock(16, 8, heads=4).to(DTYPE)
    tokens = torch.randn(2, 5, 16, dtype=DTYPE, requires_grad=True)
    context = torch.randn(2, 6, 8, dtype=DTYPE, requires_grad=True)
    probe = torch.randn(2, 5, 16, dtype=DTYPE)

    def loss():
        return (cross_attend(block, tokens, context) * probe).sum()

    def real():
        return _maybe_corrupt(loss(), corrupt)

    groups = {}
    for name, leaf in (("tokens", tokens), ("context", context), ("w_q", block.w_q.weight),
                       ("w_k", block.w_k.weight), ("w_v", block.w_v.weight)):
        groups[name] = compare(real, loss, leaf, range(leaf.numel()), SMOOTH_EPS, stencil=4)
    return GradReport("attention", seed, groups)


# -------------------------------------------------------------------- unet


def small_denoiser() -> Denoiser:
    cfg = UNetConfig(latent_channels=16, local_channels=8, widths=(8, 16), context_dim=8, temb_dim=8, heads=2)
    return Denoiser(cfg, NoiseSchedule(), downsample=8)


def unet_suite(seed: int, corrupt: bool = False, count: int = 6) -> GradReport:
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 404])
    net = small_denoiser()
    full = extract_conditions(rng.uniform(0.0, 1.0, (16, 16, 3)))
    # one fully conditioned item and one with every condition dropped (null tokens, zero maps)
    cond = collate([full, replace(full, drop_mask=(True,) * 4)], 16, DTYPE)
    z0 = torch.randn(2, 16, 2, 2, dtype=DTYPE, requires_grad=True)
    t = torch.tensor([int(v) for v in rng.integers(1, 1001, size=2)])
    noise = torch.randn(2, 16, 2, 2, dtype=DTYPE)

    def loss():
        return diffusion_loss(net, z0, cond, None, t=t, noise=noise)

    def real():
        return _maybe_corrupt(loss(), corrupt)

    groups = {"latent": compare(real, loss, z0, _sample_indices(rng, z0.numel(), count), SMOOTH_EPS, stencil=4)}
    families: dict[str, list[torch.Tensor]] = {}
    for name, p in net.named_parameters():
        parts = name.split(".")
        families.setdefault(".".join(parts[:2]), []).append(p)
    for fam, params in sorted(families.items()):
        worst = 0.0
        for k in rng.choice(len(params), size=min(2, len(params)), replace=False):
            p = params[int(k)]
            worst = max(worst, compare(real, loss, p, _sample_indices(rng, p.numel(), count), SMOOTH_EPS, stencil=4))
        groups[fam] = worst
    return GradReport("unet", seed, groups)


SUITES = {"renderer": renderer_suite, "vq": vq_suite, "attention": attention_suite, "unet": unet_suite}


def run_suite(target: str, seed: int = 0, corrupt: bool = False) -> GradReport:
    if target not in SUITES:
        raise ValueError(f"unknown gradcheck target {target!r}; choose from {', '.join(TARGETS)}")
    return SUITES[target](seed, corrupt)
