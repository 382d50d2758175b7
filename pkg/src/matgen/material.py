"""SVBRDF map container, PNG persistence, procedural toy materials and crops."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from matgen.ndmath import DTYPE

MAP_NAMES = ("diffuse", "normal", "roughness", "specular")
TOY_KINDS = ("checker", "stripes", "blobs", "cells")


class MaterialError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def decode_normals(encoded: torch.Tensor) -> torch.Tensor:
    """[0,1] encoding to unit vectors, renormalized."""
    n = 2.0 * encoded - 1.0
    return n / torch.sqrt((n * n).sum(-1, keepdim=True) + 1e-12)


def encode_normals(vectors: torch.Tensor) -> torch.Tensor:
    n = vectors / torch.sqrt((vectors * vectors).sum(-1, keepdim=True) + 1e-12)
    return (n + 1.0) / 2.0


@dataclass
class MaterialMaps:
    """Four H×W×3 maps in [0,1]. Fields may carry leading batch dimensions."""

    diffuse: torch.Tensor
    normal: torch.Tensor
    roughness: torch.Tensor
    specular: torch.Tensor

    @property
    def resolution(self) -> int:
        return self.diffuse.shape[-2]

    def maps(self) -> tuple[torch.Tensor, ...]:
        return (self.diffuse, self.normal, self.roughness, self.specular)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(zip(MAP_NAMES, self.maps()))

    def unit_normals(self) -> torch.Tensor:
        return decode_normals(self.normal)

    def to_tensor(self) -> torch.Tensor:
        """(..., 12, H, W) channel-first stack in map order."""
        x = torch.cat(self.maps(), dim=-1)
        return x.movedim(-1, -3)

    @classmethod
    def from_tensor(cls, x: torch.Tensor) -> "MaterialMaps":
        if x.shape[-3] != 12:
            raise MaterialError(f"expected 12 channels, got {x.shape[-3]}")
        hwc = x.movedim(-3, -1)
        return cls(*(hwc[..., 3 * i : 3 * i + 3] for i in range(4)))

    def detach(self) -> "MaterialMaps":
        return MaterialMaps(*(m.detach() for m in self.maps()))

    def validate(self) -> "MaterialMaps":
        shapes = {tuple(m.shape) for m in self.maps()}
        if len(shapes) != 1:
            raise MaterialError(f"maps do not share one shape: {sorted(shapes)}")
        shape = shapes.pop()
        if len(shape) < 3 or shape[-1] != 3:
            raise MaterialError(f"maps must be H×W×3, got {shape}")
        h, w = shape[-3], shape[-2]
        if h != w:
            raise MaterialError(f"maps must be square, got {h}x{w}")
        if not _is_pow2(h):
            raise MaterialError(f"resolution {h} is not a power of two")
        for name, m in self.as_dict().items():
            if not torch.isfinite(m).all():
                raise MaterialError(f"{name} map has non-finite values")
            if m.min() < 0.0 or m.max() > 1.0:
                raise MaterialError(f"{name} map leaves [0,1]")
        raw = 2.0 * self.normal - 1.0
        if (raw.norm(dim=-1) < 1e-6).any():
            raise MaterialError("normal map has degenerate (zero-length) vectors")
        return self


# ---------------------------------------------------------------- persistence


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    elif arr.shape[-1] == 4:
        arr = arr[..., :3]
    elif arr.shape[-1] == 2:
        arr = np.repeat(arr[..., :1], 3, axis=-1)
    if arr.dtype != np.uint8:
        raise MaterialError(f"{path.name}: expected 8-bit image, got {arr.dtype}")
    return arr


def read_image(path: str | Path) -> np.ndarray:
    """8-bit PNG as float64 (H, W, 3) in [0, 1]; gray images are replicated."""
    path = Path(path)
    if not path.is_file():
        raise MaterialError(f"image not found: {path}")
    try:
        return _read_png(path).astype(np.float64) / 255.0
    except OSError as exc:
        raise MaterialError(f"unreadable image {path}: {exc}") from exc


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-to-even."""
    return np.clip(np.rint(np.clip(values, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def load_material(directory: str | Path) -> MaterialMaps:
    directory = Path(directory)
    arrays = {}
    for name in MAP_NAMES:
        path = directory / f"{name}.png"
        if not path.is_file():
            raise MaterialError(f"missing map: {name}")
        arrays[name] = _read_png(path)
    sizes = {name: a.shape[:2] for name, a in arrays.items()}
    if len(set(sizes.values())) != 1:
        raise MaterialError(f"size mismatch between maps: {sizes}")
    h, w = arrays["diffuse"].shape[:2]
    if h != w:
        raise MaterialError(f"non-square maps: {h}x{w}")
    if not _is_pow2(h):
        raise MaterialError(f"resolution {h} is not a power of two")
    t = {k: torch.as_tensor(v.astype(np.float64) / 255.0, dtype=DTYPE) for k, v in arrays.items()}
    t["normal"] = encode_normals(2.0 * t["normal"] - 1.0)
    return MaterialMaps(**t).validate()


def save_image(path: str | Path, image: np.ndarray | torch.Tensor) -> None:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    Image.fromarray(to_bytes(image)).save(path)


def save_material(maps: MaterialMaps, directory: str | Path) -> None:
    maps.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, m in maps.as_dict().items():
        arr = m.detach().cpu().numpy()
        if name in ("roughness", "specular") and np.allclose(arr, arr[..., :1]):
            arr = arr.mean(-1)
        save_image(directory / f"{name}.png", arr)


# ------------------------------------------------------------ toy materials


def normals_from_height(height: np.ndarray, strength: float = 1.0) -> np.ndarray:
    """Unit normals of a periodic height field via central differences."""
    res = height.shape[0]
    dx = (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1)) * 0.5 * res / 2.0
    dy = (np.roll(height, -1, axis=0) - np.roll(height, 1, axis=0)) * 0.5 * res / 2.0
    # image rows grow downward, surface y grows upward
    n = np.stack([-strength * dx, strength * dy, np.ones_like(height)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _smooth(x: np.ndarray, passes: int = 1) -> np.ndarray:
    for _ in range(passes):
        x = (
            4 * x
            + np.roll(x, 1, 0) + np.roll(x, -1, 0) + np.roll(x, 1, 1) + np.roll(x, -1, 1)
        ) / 8.0
    return x


def _pattern(kind: str, rng: np.random.Generator, res: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask in [0,1], height field) on a res×res grid."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    if kind == "checker":
        n = int(rng.choice([2, 4]))
        cell = ((np.floor(xx * n) + np.floor(yy * n)) % 2).astype(np.float64)
        return cell, _smooth(cell, 1) * 0.06
    if kind == "stripes":
        freq = int(rng.integers(2, 5))
        u = (xx, yy, xx + yy)[int(rng.integers(0, 3))]
        s = np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
        mask = 0.5 + 0.5 * np.tanh(3.0 * s)
        return mask, 0.02 * s
    if kind == "blobs":
        field = np.zeros((res, res))
        for _ in range(int(rng.integers(3, 7))):
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.2)
            ddx = np.minimum(np.abs(xx - cx), 1 - np.abs(xx - cx))
            ddy = np.minimum(np.abs(yy - cy), 1 - np.abs(yy - cy))
            field += np.exp(-(ddx**2 + ddy**2) / (2 * r * r))
        mask = np.clip(field, 0, 1)
        return mask, 0.05 * mask
    if kind == "cells":
        pts = rng.uniform(0, 1, (int(rng.integers(4, 9)), 2))
        d = []
        for px, py in pts:
            ddx = np.minimum(np.abs(xx - px), 1 - np.abs(xx - px))
            ddy = np.minimum(np.abs(yy - py), 1 - np.abs(yy - py))
            d.append(np.sqrt(ddx**2 + ddy**2))
        d = np.sort(np.stack(d), axis=0)
        edge = np.clip((d[1] - d[0]) * 12.0, 0, 1)
        ident = np.argmin(np.stack([np.minimum(np.abs(xx - px), 1 - np.abs(xx - px)) ** 2
                                    + np.minimum(np.abs(yy - py), 1 - np.abs(yy - py)) ** 2
                                    for px, py in pts]), axis=0)
        mask = (ident % 2).astype(np.float64) * edge
        return mask, 0.04 * edge
    raise MaterialError(f"unknown toy material kind {kind!r}")


def generate_toy_material(seed: int, kind: str, resolution: int) -> MaterialMaps:
    if kind not in TOY_KINDS:
        raise MaterialError(f"unknown toy material kind {kind!r}")
    if not _is_pow2(resolution) or resolution < 16:
        raise MaterialError(f"resolution must be a power of two >= 16, got {resolution}")
    rng = np.random.default_rng([seed, TOY_KINDS.index(kind)])
    mask, height = _pattern(kind, rng, resolution)
    c0, c1 = rng.uniform(0.05, 0.95, (2, 3))
    m = mask[..., None]
    diffuse = c0 * (1 - m) + c1 * m
    r0, r1 = rng.uniform(0.25, 0.9, 2)
    s0, s1 = rng.uniform(0.02, 0.6, 2)
    rough = np.repeat((r0 * (1 - mask) + r1 * mask)[..., None], 3, -1)
    spec = np.repeat((s0 * (1 - mask) + s1 * mask)[..., None], 3, -1)
    normal = (normals_from_height(height) + 1.0) / 2.0
    as_t = lambda a: torch.as_tensor(np.clip(a, 0.0, 1.0), dtype=DTYPE)
    return MaterialMaps(as_t(diffuse), as_t(normal), as_t(rough), as_t(spec)).validate()


# ------------------------------------------------------------------- crops


@dataclass
class Crop:
    level: int
    row: int
    col: int
    footprint: tuple[int, int, int]  # (y0, x0, size) in source pixels
    maps: MaterialMaps


@dataclass
class CropPyramid:
    source: MaterialMaps
    levels: list[tuple[int, list[Crop]]] = field(default_factory=list)

    def crops(self) -> list[Crop]:
        return [c for _, cs in self.levels for c in cs]


def resize_maps(maps: MaterialMaps, size: int) -> MaterialMaps:
    if maps.resolution == size:
        return maps
    x = maps.to_tensor().unsqueeze(0)
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                      antialias=size < maps.resolution)
    out = MaterialMaps.from_tensor(y[0])
    out.normal = encode_normals(2.0 * out.normal - 1.0)
    return MaterialMaps(*(m.clamp(0.0, 1.0) for m in out.maps()))


def crop_pyramid(
    maps: MaterialMaps, max_level: int, resolution: int | None = None, resize: bool = True
) -> CropPyramid:
    res = maps.resolution
    target = res if resolution is None else resolution
    if max_level < 0 or res % (2**max_level) or res // (2**max_level) < 16:
        raise MaterialError(
            f"max_level {max_level} too deep for resolution {res} (crops must stay >= 16)"
        )
    pyramid = CropPyramid(source=maps)
    for level in range(max_level + 1):
        n = 2**level
        size = res // n
        crops = []
        for r in range(n):
            for c in range(n):
                y0, x0 = r * size, c * size
                sub = MaterialMaps(*(m[y0 : y0 + size, x0 : x0 + size] for m in maps.maps()))
                if resize:
                    sub = resize_maps(sub, target)
                crops.append(Crop(level, r, c, (y0, x0, size), sub))
        pyramid.levels.append((n, crops))
    return pyramid


# ------------------------------------------------------------------ metrics


def rmse(a, b):
    """Per-map RMSE for MaterialMaps, scalar RMSE for arrays."""
    if isinstance(a, MaterialMaps):
        if not isinstance(b, MaterialMaps):
            raise MaterialError("rmse needs two MaterialMaps or two arrays")
        return {name: rmse(x, y) for name, x, y in zip(MAP_NAMES, a.maps(), b.maps())}
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise MaterialError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.sqrt(((a - b) ** 2).mean()))
