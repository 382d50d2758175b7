"""Versioned binary checkpoints.

Layout: 5-byte magic, little-endian uint32 header length, UTF-8 JSON header
(config echo, tensor manifest, scalar state), then every tensor as
little-endian float64 in manifest order. JSON keys are sorted so identical
state always yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

VQ_MAGIC = b"MFVQ1"
DM_MAGIC = b"MFDM1"


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(magic: bytes, header: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    names = list(tensors)
    manifest = [[n, list(tensors[n].shape)] for n in names]
    head = _dumps({"meta": header, "tensors": manifest})
    parts = [magic, struct.pack("<I", len(head)), head]
    for n in names:
        arr = tensors[n].detach().cpu().to(torch.float64).numpy()
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if blob[: len(magic)] != magic:
        raise CheckpointError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}")
    off = len(magic)
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    head = json.loads(blob[off : off + n].decode("utf-8"))
    off += n
    tensors = {}
    for name, shape in head["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
        off += 8 * count
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in checkpoint")
    return head["meta"], tensors


def write_checkpoint(path: str | Path, magic: bytes, header: dict,
                     tensors: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(magic, header, tensors))
    # human-readable echo next to the blob
    path.with_name(path.name + ".config.json").write_text(
        json.dumps(header.get("config", {}), sort_keys=True, indent=2) + "\n"
    )


def read_checkpoint(path: str | Path, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), magic)


# --------------------------------------------------------------- optimizer


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, dict[str, torch.Tensor]]:
    """Adam/AdamW moments as named tensors plus per-parameter step counts."""
    steps, tensors = {}, {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        steps[str(i)] = int(float(st["step"]))
        tensors[f"{prefix}.{i}.exp_avg"] = st["exp_avg"]
        tensors[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"]
    lrs = [g["lr"] for g in opt.param_groups]
    return {"steps": steps, "lr": lrs}, tensors


def load_optimizer(opt: torch.optim.Optimizer, prefix: str, meta: dict,
                   tensors: dict[str, torch.Tensor]) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for key, step in meta["steps"].items():
        p = params[int(key)]
        opt.state[p] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": tensors[f"{prefix}.{key}.exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"{prefix}.{key}.exp_avg_sq"].to(p.dtype).clone(),
        }
    for g, lr in zip(opt.param_groups, meta["lr"]):
        g["lr"] = lr
