"""Command-line entry point: ``matgen <verb> [options]``.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure. Every
failure also prints one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from matgen.checkpoint import CheckpointError
from matgen.conditioning import ConditionSet, extract_palette, image_embedding, read_palette
from matgen.diffusion import SamplerConfig
from matgen.gradcheck import TARGETS, TOLERANCE, run_suite
from matgen.material import MaterialError, load_material, read_image, save_image, save_material
from matgen.pipeline import (
    COLUMNS,
    REFERENCE_ESTIMATION,
    AblationProfile,
    TrainConfig,
    build_toy_dataset,
    check_compatible,
    dm_defaults,
    evaluate,
    generate,
    load_dm,
    load_vq,
    material_grid,
    run_ablation,
    score,
    train_diffusion,
    train_vq,
    vq_defaults,
)
from matgen.renderer import RenderConfig, preview, render, tonemap


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return vals


def _dataset_flags(p: argparse.ArgumentParser, count: int = 16) -> None:
    p.add_argument("--data-seed", type=int, default=0, help="procedural dataset seed")
    p.add_argument("--count", type=int, default=count, help="number of toy materials")
    p.add_argument("--max-level", type=int, default=0, help="deepest crop-pyramid level")
    p.add_argument("--split", choices=("train", "test", "all"), default="all",
                   help="which dataset split to use")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON TrainConfig; flags below override it")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> Parser:
    parser = Parser(prog="matgen", description="Multi-map material generation toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("dataset", help="write a procedural toy dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--max-level", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-vq", help="train the multi-encoder VQ autoencoder")
    _train_flags(p)
    _dataset_flags(p)
    p.add_argument("--resolution", type=int)
    p.add_argument("--mode", choices=("multi", "single"))
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--no-render", action="store_true", help="drop the rendering loss")
    p.add_argument("--no-perceptual", action="store_true", help="drop the perceptual loss")
    p.add_argument("--no-adversarial", action="store_true", help="drop the adversarial loss")
    p.add_argument("--eval-every", type=int, default=0, help="held-out report period (0: off)")

    p = sub.add_parser("train-dm", help="train the conditional latent diffusion model")
    _train_flags(p)
    _dataset_flags(p)
    p.add_argument("--ckpt-vq", type=Path, required=True)
    p.add_argument("--resume", type=Path,
                   help="diffusion checkpoint to continue up to --iterations (its config is kept)")

    p = sub.add_parser("generate", help="sample materials, optionally conditioned")
    p.add_argument("--ckpt-vq", type=Path, required=True)
    p.add_argument("--ckpt-dm", type=Path, required=True)
    p.add_argument("--sketch", type=Path, help="binary sketch PNG")
    p.add_argument("--palette", type=Path, help="palette text file, 'L a b weight' per line")
    p.add_argument("--sample", type=Path, help="material photo; its embedding becomes a condition")
    p.add_argument("--sample-palette", action="store_true", help="also take the palette from --sample")
    p.add_argument("--estimate-from", type=Path, help="render image used as the local condition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100, help="DDIM steps")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--grid", type=int, help="draw N samples and write grid.png")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("estimate", help="recover maps from a single render")
    p.add_argument("--ckpt-vq", type=Path, required=True)
    p.add_argument("--ckpt-dm", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="ground-truth material directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("render", help="render a material directory")
    p.add_argument("--material", type=Path, required=True)
    p.add_argument("--light", type=_triple, default=(0.0, 0.0, 2.0), help="x,y,z")
    p.add_argument("--camera", type=_triple, default=(0.0, 0.0, 2.0), help="x,y,z")
    p.add_argument("--intensity", type=float, default=6.0)
    p.add_argument("--linear", action="store_true", help="skip gamma encoding")
    p.add_argument("--out", type=Path, required=True, help="output PNG")

    p = sub.add_parser("eval", help="RMSE table for a trained model")
    p.add_argument("--ckpt-vq", type=Path, required=True)
    p.add_argument("--ckpt-dm", type=Path)
    p.add_argument("--mode", required=True,
                   choices=("reconstruction", "estimation", "unconditional", "sample-quality"))
    _dataset_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--target", choices=TARGETS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true",
                   help="debug: scale analytic gradients by 1.01 to prove the check fails")

    p = sub.add_parser("ablate", help="equal-budget VQ ablations")
    p.add_argument("--suite", choices=("architecture", "losses"), required=True)
    p.add_argument("--iterations", type=int, default=AblationProfile.iterations)
    p.add_argument("--materials", type=int, default=AblationProfile.materials)
    p.add_argument("--seeds", type=int, default=len(AblationProfile.seeds), help="number of seeds")
    p.add_argument("--out", type=Path, help="directory for table.txt, table.csv and grids")
    p.add_argument("--json", action="store_true")
    return parser


# ------------------------------------------------------------------ helpers


def _echo(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, sort_keys=True, indent=2)
    (out / "config.json").write_text(text + "\n")
    print("config " + json.dumps(payload, sort_keys=True))


def _train_config(args, defaults) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else {}
    over = {k: getattr(args, k) for k in ("iterations", "batch_size", "lr", "seed", "dtype")
            if getattr(args, k, None) is not None}
    extra = {}
    if getattr(args, "resolution", None) is not None:
        extra["resolution"] = args.resolution
    if getattr(args, "mode", None):
        extra["codebook_mode"] = args.mode
    if getattr(args, "codebook_size", None):
        extra["codebook_size"] = args.codebook_size
    for flag, key in (("no_render", "use_render"), ("no_perceptual", "use_perceptual"),
                      ("no_adversarial", "use_adversarial")):
        if getattr(args, flag, False):
            extra[key] = False
    base.pop("stage", None)
    return defaults(**{**base, **over, **extra})


def _items(args, resolution: int):
    ds = build_toy_dataset(args.data_seed, args.count, resolution, args.max_level)
    return ds.items if args.split == "all" else ds.split(args.split)


def _conditions(args) -> ConditionSet | None:
    cs = ConditionSet()
    if args.sketch:
        cs.sketch = (read_image(args.sketch)[..., :1] >= 0.5).astype(np.float64)
    if args.palette:
        cs.palette = read_palette(args.palette)
    if args.sample:
        photo = read_image(args.sample)
        cs.embedding = image_embedding(photo)
        if args.sample_palette and cs.palette is None:
            cs.palette = extract_palette(photo)
    elif args.sample_palette:
        raise ValueError("--sample-palette needs --sample")
    if args.estimate_from:
        cs.render = read_image(args.estimate_from)
    return cs if any(cs.present()) else None


def _write_sample(maps, directory: Path) -> None:
    save_material(maps, directory)
    save_image(directory / "preview.png", preview(maps))


def _metrics_line(values) -> str:
    return " ".join(f"{c}={v:.4f}" for c, v in zip(COLUMNS, values))


# ------------------------------------------------------------------- verbs


def cmd_dataset(args) -> int:
    ds = build_toy_dataset(args.seed, args.count, args.resolution, args.max_level)
    ds.write(args.out)
    print(f"wrote {len(ds.items)} crops ({len(ds.train)} train, {len(ds.test)} test) to {args.out}")
    return 0


def cmd_train_vq(args) -> int:
    cfg = _train_config(args, vq_defaults)
    dataset = {"seed": args.data_seed, "count": args.count, "max_level": args.max_level, "split": args.split}
    _echo(args.out, {"verb": "train-vq", "train": cfg.to_dict(), "dataset": dataset})
    items = _items(args, cfg.resolution)
    held = build_toy_dataset(args.data_seed, args.count, cfg.resolution, args.max_level).test
    run = train_vq(cfg, items, held or items, args.eval_every, args.out)
    for r in run.reports:
        print(f"iter {r.iteration}: {_metrics_line(r.values())}")
    print(f"final loss {run.curve[-1][1]:.6f}; checkpoint {args.out / 'vq.ckpt'}")
    return 0


def cmd_train_dm(args) -> int:
    vq_run = load_vq(args.ckpt_vq)
    cfg = _train_config(args, dm_defaults)
    cfg = TrainConfig(**{**cfg.to_dict(), "resolution": vq_run.config.resolution})
    prior = None
    if args.resume is not None:
        prior = load_dm(args.resume)
        cfg = TrainConfig(**{**prior.config.to_dict(), "iterations": cfg.iterations})
    dataset = {"seed": args.data_seed, "count": args.count, "max_level": args.max_level, "split": args.split}
    _echo(args.out, {"verb": "train-dm", "train": cfg.to_dict(), "dataset": dataset,
                     "ckpt_vq": str(args.ckpt_vq),
                     "resume": None if prior is None else str(args.resume)})
    run = train_diffusion(cfg, vq_run.model, _items(args, cfg.resolution), args.out, resume=prior)
    last = f"final loss {run.curve[-1][1]:.6f}; " if run.curve else ""
    print(f"{last}checkpoint {args.out / 'dm.ckpt'} at iteration {run.iteration}")
    return 0


def _models(args):
    vq_run, dm_run = load_vq(args.ckpt_vq), load_dm(args.ckpt_dm)
    check_compatible(vq_run.model, dm_run.net)
    return vq_run, dm_run


def cmd_generate(args) -> int:
    vq_run, dm_run = _models(args)
    cond = _conditions(args)
    res = vq_run.config.resolution
    if cond is not None:
        for name in ("sketch", "render"):
            img = getattr(cond, name)
            if img is not None and img.shape[0] != res:
                raise ValueError(f"{name} image is {img.shape[0]}px, model resolution is {res}")
    n = args.grid or 1
    if n < 1:
        raise ValueError("--grid must be >= 1")
    sampler = SamplerConfig(steps=args.steps, eta=args.eta, seed=args.seed)
    mats = generate(vq_run.model, dm_run.net, [cond] * n, res, sampler)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(mats):
        _write_sample(m, args.out / f"sample_{i:03d}")
    if args.grid:
        save_image(args.out / "grid.png", material_grid(mats))
    active = cond.active() if cond else (False,) * 4
    print(f"wrote {n} sample(s) to {args.out}; conditions "
          + ",".join(c for c, a in zip(("embedding", "palette", "sketch", "render"), active) if a)
          if any(active) else f"wrote {n} unconditional sample(s) to {args.out}")
    return 0


def cmd_estimate(args) -> int:
    vq_run, dm_run = _models(args)
    res = vq_run.config.resolution
    image = read_image(args.input)
    if image.shape[0] != res or image.shape[1] != res:
        raise ValueError(f"input is {image.shape[1]}x{image.shape[0]}, model resolution is {res}")
    truth = load_material(args.truth) if args.truth else None
    (maps,) = generate(vq_run.model, dm_run.net, [ConditionSet(render=image)], res,
                       SamplerConfig(steps=args.steps, seed=args.seed))
    _write_sample(maps, args.out)
    if truth is not None:
        rep = score(maps, truth)
        print("  ".join(f"{c:>7}" for c in COLUMNS))
        print("  ".join(f"{v:7.4f}" for v in rep.values()))
        print("reference (full scale): " + "/".join(f"{v:.3f}" for v in REFERENCE_ESTIMATION))
    return 0


def cmd_render(args) -> int:
    maps = load_material(args.material)
    cfg = RenderConfig(args.light, args.intensity, args.camera)
    img = render(maps, cfg).detach()
    save_image(args.out, tonemap(img, "linear" if args.linear else "gamma22"))
    return 0


def cmd_eval(args) -> int:
    vq_run = load_vq(args.ckpt_vq)
    net = None
    if args.mode != "reconstruction":
        if args.ckpt_dm is None:
            raise ValueError(f"mode {args.mode} needs --ckpt-dm")
        net = load_dm(args.ckpt_dm).net
        check_compatible(vq_run.model, net)
    ds = build_toy_dataset(args.data_seed, args.count, vq_run.config.resolution, args.max_level)
    items = ds.items if args.split == "all" else ds.split(args.split)
    result = evaluate(vq_run.model, net, items, args.mode, args.seed, args.steps, reference=ds.train)
    if args.json:
        print(json.dumps({"mode": args.mode, "columns": list(COLUMNS),
                          "rows": {n: list(r.values()) for n, r in result.rows},
                          "mean": list(result.mean.values())}, sort_keys=True))
    else:
        print(result.table())
    return 0


def cmd_gradcheck(args) -> int:
    targets = TARGETS if args.target == "all" else (args.target,)
    failed = False
    for t in targets:
        rep = run_suite(t, args.seed, args.corrupt_gradient)
        print("\n".join(rep.lines()))
        failed |= not rep.passed
    print(f"tolerance {TOLERANCE:.0e}: {'FAIL' if failed else 'ok'}")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    if args.seeds < 1 or args.iterations < 1 or args.materials < 1:
        raise ValueError("--seeds, --iterations and --materials must be positive")
    profile = AblationProfile(materials=args.materials, iterations=args.iterations,
                              seeds=tuple(range(args.seeds)))
    result = run_ablation(args.suite, profile)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table.txt").write_text(result.table() + "\n")
        (args.out / "table.csv").write_text(result.csv())
        rows = [result.grids["GT"]] + [result.grids[a] for a in result.arms]
        save_image(args.out / "grid.png", np.concatenate(rows, axis=0))
    print(json.dumps(result.to_json(), sort_keys=True) if args.json else result.table())
    return 0


COMMANDS = {
    "dataset": cmd_dataset,
    "train-vq": cmd_train_vq,
    "train-dm": cmd_train_dm,
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", str(exc))
    try:
        return COMMANDS[args.verb](args)
    except (ValueError, MaterialError, CheckpointError, FileNotFoundError) as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except Exception as exc:  # runtime failure: divergence, I/O, numerical trouble
        return _fail(2, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
