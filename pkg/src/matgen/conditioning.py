"""Condition extraction, the condition encoder and the condition-drop protocol.

Two global conditions (image embedding, colour palette) reach the denoiser as
cross-attention tokens; two local ones (sketch, render image) are encoded to
the latent resolution and concatenated to the noisy latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from matgen.ndmath import DTYPE, softmax

CONDITION_NAMES = ("embedding", "palette", "sketch", "render")
EMBED_DIM = 64
PALETTE_K = 5
PALETTE_THRESHOLD = 10.0
SKETCH_THRESHOLD = 0.25

# sRGB primaries to XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] (..., 3) to CIELAB under D65."""
    xyz = srgb_to_linear(np.asarray(rgb, dtype=np.float64)) @ _RGB_TO_XYZ.T
    t = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def delta_e76(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(lab1, float) - np.asarray(lab2, float), axis=-1)


def _as_image(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    return image


def extract_palette(image, k: int = PALETTE_K, delta_threshold: float = PALETTE_THRESHOLD) -> np.ndarray:
    """Top-k colour clusters as rows (L, a, b, weight), weights descending.

    Distinct 8-bit colours are visited by descending count; each joins the
    nearest cluster whose centroid lies within ``delta_threshold`` (CIE76) or
    opens a new one. Weights are fractions of the image's pixels.
    """
    img = _as_image(image)
    if img.size == 0:
        raise ValueError("cannot extract a palette from an empty image")
    if k < 1 or delta_threshold <= 0:
        raise ValueError("k must be >= 1 and delta_threshold > 0")
    codes = np.rint(np.clip(img, 0, 1) * 255).astype(np.int64).reshape(-1, 3)
    colors, counts = np.unique(codes, axis=0, return_counts=True)
    order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0], -counts))
    labs = srgb_to_lab(colors[order] / 255.0)
    counts = counts[order].astype(np.float64)

    centroids: list[np.ndarray] = []
    totals: list[float] = []
    for lab, n in zip(labs, counts):
        if centroids:
            d = delta_e76(np.stack(centroids), lab)
            j = int(np.argmin(d))
            if d[j] <= delta_threshold:
                totals[j] += n
                centroids[j] = centroids[j] + (lab - centroids[j]) * (n / totals[j])
                continue
        centroids.append(lab.copy())
        totals.append(n)
    totals_arr = np.asarray(totals)
    top = np.argsort(-totals_arr, kind="stable")[:k]
    total = codes.shape[0]
    return np.array([[*centroids[i], totals_arr[i] / total] for i in top])


def extract_sketch(image, threshold: float = SKETCH_THRESHOLD) -> np.ndarray:
    """Binary Sobel edge map, H×W×1."""
    img = _as_image(image)
    gray = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    norm = mag / peak if peak > 0 else np.zeros_like(mag)
    return (norm > threshold).astype(np.float64)[..., None]


_EMBED_PROJECTION = np.random.default_rng(20240517).standard_normal((EMBED_DIM, 64)) / 8.0


def image_embedding(image) -> np.ndarray:
    """Colour + gradient-orientation histogram, randomly projected, unit norm."""
    img = np.clip(_as_image(image), 0.0, 1.0)
    hist = []
    for ch in range(3):
        h, _ = np.histogram(img[..., ch], bins=16, range=(0.0, 1.0))
        hist.append(h / img[..., ch].size)
    gray = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    oh, _ = np.histogram(ang, bins=16, range=(0.0, 2 * np.pi), weights=mag)
    oh = oh / mag.sum() if mag.sum() > 0 else oh
    feat = np.concatenate(hist + [oh])
    v = _EMBED_PROJECTION @ feat
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------- palette IO


def write_palette(path: str | Path, palette: np.ndarray) -> None:
    lines = [" ".join(f"{x:.6f}" for x in row) for row in np.asarray(palette)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_palette(path: str | Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'L a b weight'")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: empty palette")
    pal = np.array(rows)
    if (pal[:, 3] <= 0).any():
        raise ValueError(f"{path}: palette weights must be positive")
    return pal[np.argsort(-pal[:, 3], kind="stable")][:PALETTE_K]


# ------------------------------------------------------------ condition sets


@dataclass
class ConditionSet:
    embedding: np.ndarray | None = None  # (EMBED_DIM,)
    palette: np.ndarray | None = None  # (n <= k, 4)
    sketch: np.ndarray | None = None  # (H, W, 1)
    render: np.ndarray | None = None  # (H, W, 3)
    drop_mask: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def present(self) -> tuple[bool, ...]:
        return tuple(getattr(self, n) is not None for n in CONDITION_NAMES)

    def active(self) -> tuple[bool, ...]:
        """Conditions that reach the denoiser: present and not dropped."""
        return tuple(p and not d for p, d in zip(self.present(), self.drop_mask))


def extract_conditions(image) -> ConditionSet:
    """All four conditions from one display-space image."""
    img = np.clip(_as_image(image), 0.0, 1.0)
    return ConditionSet(
        embedding=image_embedding(img),
        palette=extract_palette(img),
        sketch=extract_sketch(img),
        render=img,
    )


def drop_conditions(conds: ConditionSet, rng: np.random.Generator) -> ConditionSet:
    """Keep all (p=0.1), drop all (p=0.1), else drop each independently with p=0.5."""
    u = rng.uniform()
    if u < 0.1:
        mask = (False,) * 4
    elif u < 0.2:
        mask = (True,) * 4
    else:
        mask = tuple(bool(x) for x in rng.uniform(size=4) < 0.5)
    return replace(conds, drop_mask=mask)


@dataclass
class ConditionBatch:
    """Dense, stacked conditions; ``dropped`` marks absent or masked entries."""

    embedding: torch.Tensor  # (B, EMBED_DIM)
    palette: torch.Tensor  # (B, k, 4), Lab scaled to roughly unit range
    sketch: torch.Tensor  # (B, 1, H, W)
    render: torch.Tensor  # (B, 3, H, W)
    dropped: torch.Tensor  # (B, 4) bool

    @property
    def size(self) -> int:
        return self.dropped.shape[0]

    def to(self, dtype: torch.dtype) -> "ConditionBatch":
        return ConditionBatch(self.embedding.to(dtype), self.palette.to(dtype),
                              self.sketch.to(dtype), self.render.to(dtype), self.dropped)


def palette_features(palette: np.ndarray | None, k: int = PALETTE_K) -> np.ndarray:
    out = np.zeros((k, 4))
    if palette is not None:
        p = np.asarray(palette, dtype=np.float64)[:k]
        out[: len(p)] = p / np.array([100.0, 128.0, 128.0, 1.0])
    return out


def collate(sets: list[ConditionSet], resolution: int, dtype: torch.dtype = DTYPE) -> ConditionBatch:
    emb, pal, sk, rd, dropped = [], [], [], [], []
    for s in sets:
        emb.append(np.zeros(EMBED_DIM) if s.embedding is None else s.embedding)
        pal.append(palette_features(s.palette))
        for arr, store, ch in ((s.sketch, sk, 1), (s.render, rd, 3)):
            if arr is None:
                store.append(np.zeros((ch, resolution, resolution)))
            else:
                if arr.shape[:2] != (resolution, resolution):
                    raise ValueError(
                        f"local condition is {arr.shape[0]}x{arr.shape[1]}, "
                        f"material resolution is {resolution}"
                    )
                store.append(np.moveaxis(arr, -1, 0))
        dropped.append([not a for a in s.active()])
    t = lambda xs: torch.as_tensor(np.stack(xs), dtype=dtype)
    return ConditionBatch(t(emb), t(pal), t(sk), t(rd), torch.as_tensor(dropped, dtype=torch.bool))


def null_batch(size: int, resolution: int, dtype: torch.dtype = DTYPE) -> ConditionBatch:
    return collate([ConditionSet()] * size, resolution, dtype)


# ----------------------------------------------------------------- attention


class AttentionBlock(nn.Module):
    """Multi-head scaled dot-product attention of tokens over context vectors."""

    def __init__(self, dim: int, context_dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(context_dim, dim, bias=False)
        self.w_v = nn.Linear(context_dim, dim, bias=False)

    def weights(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """(B, heads, N, M) attention weights."""
        b, n, d = tokens.shape
        dk = d // self.heads
        q = self.w_q(tokens).view(b, n, self.heads, dk).transpose(1, 2)
        k = self.w_k(context).view(b, context.shape[1], self.heads, dk).transpose(1, 2)
        return softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), axis=-1)

    def attend(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        dk = d // self.heads
        v = self.w_v(context).view(b, context.shape[1], self.heads, dk).transpose(1, 2)
        mixed = self.weights(tokens, context) @ v
        return mixed.transpose(1, 2).reshape(b, n, d)


def cross_attend(block: AttentionBlock, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
    """Residual cross-attention: tokens + softmax(QK^T/sqrt(d_k)) V."""
    if tokens.shape[-1] != block.w_q.in_features:
        raise ValueError(f"token dim {tokens.shape[-1]} != block dim {block.w_q.in_features}")
    if context.shape[-1] != block.w_k.in_features:
        raise ValueError(f"context dim {context.shape[-1]} != block context dim {block.w_k.in_features}")
    return tokens + block.attend(tokens, context)


# ----------------------------------------------------------- condition encoder


class LocalEncoder(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, downsample: int = 8, width: int = 32):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_channels, width // 2, 3, padding=1), nn.SiLU()]
        cin = width // 2
        for _ in range(int(round(math.log2(downsample)))):
            layers += [nn.Conv2d(cin, width, 4, stride=2, padding=1), nn.SiLU()]
            cin = width
        layers.append(nn.Conv2d(cin, out_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConditionEncoder(nn.Module):
    """Parallel heads: embedding and palette to context tokens, sketch and render to latent maps."""

    def __init__(self, context_dim: int = 64, downsample: int = 8, local_channels: int = 4,
                 k: int = PALETTE_K):
        super().__init__()
        self.k = k
        self.context_dim = context_dim
        self.local_channels = local_channels
        self.embedding_head = nn.Sequential(
            nn.Linear(EMBED_DIM, context_dim), nn.SiLU(), nn.Linear(context_dim, context_dim)
        )
        self.palette_head = nn.Sequential(
            nn.Linear(4 * k, 2 * context_dim), nn.SiLU(), nn.Linear(2 * context_dim, k * context_dim)
        )
        self.null_embedding = nn.Parameter(torch.randn(context_dim, dtype=DTYPE) * 0.02)
        self.null_palette = nn.Parameter(torch.randn(k, context_dim, dtype=DTYPE) * 0.02)
        self.sketch_head = LocalEncoder(1, local_channels, downsample)
        self.render_head = LocalEncoder(3, local_channels, downsample)

    @property
    def tokens(self) -> int:
        return 1 + self.k

    def context(self, cond: ConditionBatch) -> torch.Tensor:
        b = cond.size
        emb = self.embedding_head(cond.embedding).unsqueeze(1)
        emb = torch.where(cond.dropped[:, 0, None, None], self.null_embedding.expand(b, 1, -1), emb)
        pal = self.palette_head(cond.palette.reshape(b, -1)).view(b, self.k, self.context_dim)
        pal = torch.where(cond.dropped[:, 1, None, None], self.null_palette.expand(b, -1, -1), pal)
        return torch.cat([emb, pal], dim=1)

    def local(self, cond: ConditionBatch) -> torch.Tensor:
        sk = self.sketch_head(cond.sketch)
        rd = self.render_head(cond.render)
        sk = torch.where(cond.dropped[:, 2, None, None, None], torch.zeros_like(sk), sk)
        rd = torch.where(cond.dropped[:, 3, None, None, None], torch.zeros_like(rd), rd)
        return torch.cat([sk, rd], dim=1)

    def forward(self, cond: ConditionBatch) -> tuple[torch.Tensor, torch.Tensor]:
        return self.context(cond), self.local(cond)


def encode_local(encoder: ConditionEncoder, cond: ConditionBatch) -> torch.Tensor:
    return encoder.local(cond)
