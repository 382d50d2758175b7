"""Point-light Cook-Torrance renderer (GGX distribution) and the rendering loss.

The surface is the plane z=0 spanning x,y in [-1,1]; image row 0 is y=+1.
Everything is written with torch ops so gradients reach all four maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from matgen.material import MaterialMaps, decode_normals
from matgen.ndmath import DTYPE

ALPHA_MIN = 1e-3
LOG_OFFSET = 0.01
DEFAULT_INTENSITY = 6.0


@dataclass(frozen=True)
class RenderConfig:
    light_pos: tuple[float, float, float]
    light_intensity: float = DEFAULT_INTENSITY
    camera_pos: tuple[float, float, float] = (0.0, 0.0, 2.0)
    tone: str = "linear"

    def __post_init__(self):
        if self.light_pos[2] <= 0 or self.camera_pos[2] <= 0:
            raise ValueError("light and camera must sit strictly above the surface (z > 0)")
        if self.light_intensity <= 0:
            raise ValueError("light intensity must be positive")
        if self.tone not in ("linear", "gamma22"):
            raise ValueError(f"unknown tone {self.tone!r}")


@dataclass(frozen=True)
class LightingSet:
    configs: tuple[RenderConfig, ...]

    def __post_init__(self):
        if not self.configs:
            raise ValueError("LightingSet needs at least one config")
        if len(set(self.configs)) != len(self.configs):
            raise ValueError("LightingSet configs must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)


FLASH = RenderConfig(light_pos=(0.0, 0.0, 2.0), camera_pos=(0.0, 0.0, 2.0))


def surface_points(resolution: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """(H, W, 3) pixel-centre positions on the z=0 plane."""
    c = (2.0 * torch.arange(resolution, dtype=dtype) + 1.0) / resolution - 1.0
    y, x = torch.meshgrid(-c, c, indexing="ij")
    return torch.stack([x, y, torch.zeros_like(x)], dim=-1)


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1, keepdim=True)


def _normalize(v: torch.Tensor) -> torch.Tensor:
    return v / torch.sqrt(_dot(v, v))


def ggx_distribution(n_dot_h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    a2 = alpha * alpha
    denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def schlick_ggx(n_dot_x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return n_dot_x / (n_dot_x * (1.0 - k) + k)


def smith_geometry(n_dot_l: torch.Tensor, n_dot_v: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    k = alpha / 2.0
    return schlick_ggx(n_dot_l, k) * schlick_ggx(n_dot_v, k)


def schlick_fresnel(h_dot_v: torch.Tensor, f0: torch.Tensor) -> torch.Tensor:
    return f0 + (1.0 - f0) * (1.0 - h_dot_v) ** 5


def shading_terms(maps: MaterialMaps, cfg: RenderConfig) -> dict[str, torch.Tensor]:
    dtype = maps.normal.dtype
    p = surface_points(maps.resolution, dtype)
    n = decode_normals(maps.normal)
    to_light = torch.as_tensor(cfg.light_pos, dtype=dtype) - p
    r2 = _dot(to_light, to_light)
    l = to_light / torch.sqrt(r2)
    v = _normalize(torch.as_tensor(cfg.camera_pos, dtype=dtype) - p)
    h = _normalize(l + v)
    n_dot_l = _dot(n, l)
    return {
        "n_dot_l": n_dot_l,
        "n_dot_v": _dot(n, v).clamp(min=0.0),
        "n_dot_h": _dot(n, h).clamp(min=0.0),
        "h_dot_v": _dot(h, v).clamp(0.0, 1.0),
        "r2": r2,
    }


def render(maps: MaterialMaps, cfg: RenderConfig) -> torch.Tensor:
    """Linear radiance, H×W×3 (plus any batch dims carried by the maps)."""
    s = shading_terms(maps, cfg)
    n_dot_l = s["n_dot_l"].clamp(min=0.0)
    alpha = (maps.roughness * maps.roughness).clamp(min=ALPHA_MIN)
    d = ggx_distribution(s["n_dot_h"], alpha)
    g = smith_geometry(n_dot_l, s["n_dot_v"], alpha)
    f = schlick_fresnel(s["h_dot_v"], maps.specular)
    specular = d * g * f / (4.0 * n_dot_l * s["n_dot_v"] + 1e-6)
    irradiance = cfg.light_intensity / s["r2"] * n_dot_l
    return (maps.diffuse / math.pi + specular) * irradiance


def tonemap(image: torch.Tensor, tone: str = "gamma22") -> torch.Tensor:
    image = image.clamp(0.0, 1.0)
    if tone == "gamma22":
        return image ** (1.0 / 2.2)
    return image


def render_loss(a: MaterialMaps, b: MaterialMaps, lights: LightingSet) -> torch.Tensor:
    """Mean over lights of the L1 distance between log(0.01 + render) images."""
    if len(lights) == 0:
        raise ValueError("empty LightingSet")
    if a.resolution != b.resolution:
        raise ValueError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    total = 0.0
    for cfg in lights:
        ra = torch.log(LOG_OFFSET + render(a, cfg))
        rb = torch.log(LOG_OFFSET + render(b, cfg))
        total = total + (ra - rb).abs().mean()
    return total / len(lights)


def sample_lighting(seed: int, k: int = 9, intensity: float = DEFAULT_INTENSITY) -> LightingSet:
    """k point lights above the surface; every third config views from a grazing camera."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    configs = []
    for i in range(k):
        x, y = rng.uniform(-0.8, 0.8, 2)
        z = rng.uniform(0.5, 2.0)
        camera = (0.0, 0.0, 2.0)
        if i % 3 == 2:
            phi = rng.uniform(0.0, 2.0 * math.pi)
            elev = math.radians(25.0)
            camera = (2.0 * math.cos(elev) * math.cos(phi), 2.0 * math.cos(elev) * math.sin(phi),
                      2.0 * math.sin(elev))
        configs.append(RenderConfig((float(x), float(y), float(z)), intensity, camera))
    return LightingSet(tuple(configs))


def render_rmse(a: MaterialMaps, b: MaterialMaps, lights: LightingSet) -> float:
    """RMSE between display-range (clamped) renders, pooled over lights."""
    sq = [((render(a, c).clamp(0, 1) - render(b, c).clamp(0, 1)) ** 2).mean() for c in lights]
    return float(torch.sqrt(torch.stack(sq).mean()))


def preview(maps: MaterialMaps, cfg: RenderConfig = FLASH) -> torch.Tensor:
    """Display image: clamped, gamma-2.2 encoded."""
    return tonemap(render(maps, cfg).detach(), "gamma22")
