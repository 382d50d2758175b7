"""Dense-array substrate.

Arrays are ``torch.Tensor`` in float64; reverse-mode gradients come from torch
autograd. The finite-difference checker here is written independently of it and
is the oracle every gradient test in the package leans on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

Tensor = torch.Tensor


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Trailing-dimension broadcast of two shapes."""
    a, b = tuple(a), tuple(b)
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {a} and {b} are not broadcastable")
        out.append(max(da, db))
    return tuple(out)


_ELEMENTWISE = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    broadcast_shape(a.shape, b.shape)
    return _ELEMENTWISE[kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) with zero padding."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects N×C×H×W input and O×C×kh×kw kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"channel mismatch: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}"
        )
    kh, kw = kernel.shape[-2:]
    oh = conv_output_size(x.shape[2], kh, stride, pad)
    ow = conv_output_size(x.shape[3], kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"kernel {kh}x{kw} with pad {pad} yields empty output on {tuple(x.shape[2:])}"
        )
    return F.conv2d(x, kernel, stride=stride, padding=pad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for {x.ndim}-d input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def finite_difference(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` along flat coordinates."""
    base = x.detach().clone().reshape(-1)
    idx = range(base.numel()) if indices is None else indices
    out = np.zeros(base.numel())
    with torch.no_grad():
        for i in idx:
            orig = base[i].item()
            base[i] = orig + eps
            fp = float(f(base.view_as(x)))
            base[i] = orig - eps
            fm = float(f(base.view_as(x)))
            base[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between autograd and central differences.

    ``indices`` restricts the comparison to a subset of flat coordinates, which
    is how callers keep large parameter tensors cheap or avoid known kinks.
    """
    x0 = x.detach().clone()
    with torch.no_grad():
        fx = float(f(x0))
    if not np.isfinite(fx):
        raise ValueError(f"f(x) is not finite ({fx})")
    xr = x0.clone().requires_grad_(True)
    y = f(xr)
    (g,) = torch.autograd.grad(y, xr, allow_unused=True)
    analytic = np.zeros(x0.numel()) if g is None else g.detach().reshape(-1).numpy().copy()
    idx = np.arange(x0.numel()) if indices is None else np.asarray(list(indices), dtype=int)
    numeric = finite_difference(f, x0, eps, idx)
    if idx.size == 0:
        return 0.0
    return float(relative_errors(analytic[idx], numeric[idx], floor).max())


def param_grad_check(
    loss_fn: Callable[[], Tensor],
    param: torch.nn.Parameter,
    count: int = 16,
    seed: int = 0,
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """grad_check over ``count`` random coordinates of a module parameter."""
    rng = np.random.default_rng(seed)
    n = param.numel()
    idx = np.sort(rng.choice(n, size=min(count, n), replace=False))
    (g,) = torch.autograd.grad(loss_fn(), param, allow_unused=True)
    analytic = np.zeros(n) if g is None else g.detach().reshape(-1).numpy().copy()
    flat = param.data.view(-1)
    numeric = np.zeros(n)
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(loss_fn())
            flat[i] = orig - eps
            fm = float(loss_fn())
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    return float(relative_errors(analytic[idx], numeric[idx], floor).max())
