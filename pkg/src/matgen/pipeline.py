"""Dataset construction, the two training stages, evaluation and ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from matgen.checkpoint import (
    DM_MAGIC,
    VQ_MAGIC,
    load_optimizer,
    optimizer_tensors,
    read_checkpoint,
    write_checkpoint,
)
from matgen.conditioning import ConditionSet, collate, drop_conditions, extract_conditions
from matgen.diffusion import Denoiser, NoiseSchedule, SamplerConfig, UNetConfig, diffusion_loss, sample
from matgen.material import (
    MAP_NAMES,
    TOY_KINDS,
    MaterialMaps,
    crop_pyramid,
    generate_toy_material,
    rmse,
    save_image,
    save_material,
)
from matgen.renderer import LightingSet, preview, render, render_rmse, sample_lighting, tonemap
from matgen.vq import (
    LossWeights,
    PatchDiscriminator,
    RandomFeatures,
    VQConfig,
    VQModel,
    adaptive_adversarial_weight,
    compression_loss,
    hinge_d_loss,
)

log = logging.getLogger(__name__)

COLUMNS = ("Diff.", "Nrm.", "Rgh.", "Spec.", "Rend.")
HELDOUT_LIGHTS_SEED = 987_654
VQ_CSV_HEADER = ("iter", "loss_total", "loss_pixel", "loss_render", "loss_perc",
                 "loss_adv", "loss_q", "loss_c")
DM_CSV_HEADER = ("iter", "loss_diff")

# full-scale published numbers, shown beside desk-scale results for orientation only
REFERENCE_ESTIMATION = (0.021, 0.028, 0.024, 0.023, 0.044)
REFERENCE_ARCHITECTURE = {
    "Base (4096)": (0.057, 0.061, 0.114, 0.166, 0.267),
    "Base (8192)": (0.049, 0.052, 0.098, 0.144, 0.233),
    "Base (16384)": (0.047, 0.051, 0.102, 0.152, 0.227),
    "Multi Enc.": (0.016, 0.024, 0.022, 0.020, 0.041),
}
REFERENCE_LOSSES = {
    "L_pixel": (0.056, 0.084, 0.097, 0.138, 0.145),
    "+L_adv": (0.044, 0.058, 0.037, 0.163, 0.106),
    "+L_perc": (0.038, 0.030, 0.047, 0.033, 0.064),
    "+L_rend": (0.016, 0.024, 0.022, 0.020, 0.041),
}


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    stage: str = "vq"
    resolution: int = 32
    batch_size: int = 4
    iterations: int = 5000
    lr: float = 3e-4
    warmup_start_lr: float = 2e-5
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    gamma: float = 0.9
    delta: float = 0.6
    beta_c: float = 0.25
    adv_weight: float = 0.1
    adv_adaptive: bool = True
    use_render: bool = True
    use_perceptual: bool = True
    use_adversarial: bool = True
    adv_start_fraction: float = 0.3
    codebook_init: str = "data"
    codebook_mode: str = "multi"
    codebook_size: int = 256
    latent_channels: int = 4
    vq_widths: tuple[int, ...] = (32, 64, 128)
    unet_widths: tuple[int, ...] = (64, 128)
    context_dim: int = 64
    lights: int = 9
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.vq_widths = tuple(self.vq_widths)
        self.unet_widths = tuple(self.unet_widths)
        self.validate()

    def validate(self) -> None:
        if self.stage not in ("vq", "diffusion"):
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("lr", "warmup_start_lr", "batch_size", "iterations", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stage == "diffusion" and self.warmup_start_lr >= self.lr:
            raise ValueError("warm-up start rate must be below the peak rate")
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("loss weights gamma and delta must be nonnegative")
        if self.codebook_init not in ("data", "uniform"):
            raise ValueError(f"unknown codebook init {self.codebook_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64

    def vq_config(self) -> VQConfig:
        return VQConfig(mode=self.codebook_mode, codebook_size=self.codebook_size,
                        latent_channels=self.latent_channels, widths=self.vq_widths, seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(render=self.gamma, perceptual=self.delta, adversarial=self.adv_weight,
                           commitment=self.beta_c, use_render=self.use_render,
                           use_perceptual=self.use_perceptual, use_adversarial=self.use_adversarial)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.train_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vq_widths"] = list(self.vq_widths)
        d["unet_widths"] = list(self.unet_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def vq_defaults(**overrides) -> TrainConfig:
    return TrainConfig(stage="vq", **overrides)


def dm_defaults(**overrides) -> TrainConfig:
    base = dict(stage="diffusion", batch_size=8, iterations=10000, lr=5e-4, warmup_start_lr=1e-5)
    base.update(overrides)
    return TrainConfig(**base)


# ------------------------------------------------------------------ dataset


@dataclass
class DatasetItem:
    material: int
    kind: str
    level: int
    row: int
    col: int
    split: str
    maps: MaterialMaps
    lights: LightingSet
    renders: np.ndarray  # (K, H, W, 3) display-space renders

    @property
    def path(self) -> str:
        return f"mat{self.material:03d}/l{self.level}_{self.row}_{self.col}"


@dataclass
class ToyDataset:
    seed: int
    resolution: int
    max_crop_level: int
    items: list[DatasetItem]

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]

    @property
    def train(self) -> list[DatasetItem]:
        return self.split("train")

    @property
    def test(self) -> list[DatasetItem]:
        return self.split("test")

    def manifest(self) -> bytes:
        return "".join(f"{it.path}\n" for it in self.items).encode()

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        for it in self.items:
            save_material(it.maps, directory / it.path)
            for k, img in enumerate(it.renders):
                save_image(directory / it.path / f"render_{k}.png", img)
        (directory / "manifest.txt").write_bytes(self.manifest())
        for name in ("train", "test"):
            (directory / f"{name}.txt").write_text("".join(f"{it.path}\n" for it in self.split(name)))


def display_renders(maps: MaterialMaps, lights: LightingSet) -> np.ndarray:
    return np.stack([tonemap(render(maps, c).detach(), "gamma22").numpy() for c in lights])


def build_toy_dataset(seed: int, count: int, resolution: int = 32, max_crop_level: int = 0,
                      lights: int = 9) -> ToyDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    source_res = resolution * 2**max_crop_level
    n_test = int(round(0.1 * count)) if count > 1 else 0
    perm = np.random.default_rng([seed, 1]).permutation(count)
    test_ids = set(int(i) for i in perm[:n_test])
    items = []
    for m in range(count):
        kind = TOY_KINDS[m % len(TOY_KINDS)]
        source = generate_toy_material(seed * 100_003 + m, kind, source_res)
        split = "test" if m in test_ids else "train"
        for crop in crop_pyramid(source, max_crop_level, resolution).crops():
            ls = sample_lighting(hash_seed(seed, m, crop.level, crop.row, crop.col), lights)
            items.append(DatasetItem(m, kind, crop.level, crop.row, crop.col, split, crop.maps, ls,
                                     display_renders(crop.maps, ls)))
    return ToyDataset(seed, resolution, max_crop_level, items)


def hash_seed(*parts: int) -> int:
    h = hashlib.sha256(",".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def stack_maps(items, dtype=torch.float64) -> torch.Tensor:
    maps = [it.maps if isinstance(it, DatasetItem) else it for it in items]
    return torch.stack([m.to_tensor() for m in maps]).to(dtype)


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsReport:
    diffuse: float
    normal: float
    roughness: float
    specular: float
    rendering: float
    iteration: int = 0
    wall_clock: float = 0.0

    def values(self) -> tuple[float, ...]:
        return (self.diffuse, self.normal, self.roughness, self.specular, self.rendering)

    @property
    def maps_total(self) -> float:
        return self.diffuse + self.normal + self.roughness + self.specular

    @classmethod
    def mean(cls, reports: list["MetricsReport"], iteration: int = 0, wall_clock: float = 0.0):
        if not reports:
            raise ValueError("no reports to average")
        v = np.mean([r.values() for r in reports], axis=0)
        return cls(*map(float, v), iteration=iteration, wall_clock=wall_clock)


def heldout_lights(k: int = 9) -> LightingSet:
    return sample_lighting(HELDOUT_LIGHTS_SEED, k)


def score(pred: MaterialMaps, truth: MaterialMaps, lights: LightingSet | None = None) -> MetricsReport:
    lights = lights or heldout_lights()
    pred64 = MaterialMaps(*(m.detach().to(torch.float64) for m in pred.maps()))
    truth64 = MaterialMaps(*(m.detach().to(torch.float64) for m in truth.maps()))
    per = rmse(pred64, truth64)
    return MetricsReport(*(per[n] for n in MAP_NAMES), render_rmse(pred64, truth64, lights))


# --------------------------------------------------------------- VQ stage


@dataclass
class VQRun:
    config: TrainConfig
    model: VQModel
    discriminator: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    iteration: int = 0
    curve: list[tuple] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)

    def csv_text(self) -> str:
        return curve_csv(VQ_CSV_HEADER, self.curve)


def curve_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return buf.getvalue()


def new_vq_run(cfg: TrainConfig) -> VQRun:
    torch.manual_seed(cfg.seed)
    model = VQModel(cfg.vq_config()).to(cfg.torch_dtype)
    disc = PatchDiscriminator().to(cfg.torch_dtype)
    betas = (cfg.beta1, cfg.beta2)
    return VQRun(cfg, model, disc, torch.optim.Adam(model.parameters(), cfg.lr, betas=betas),
                 torch.optim.Adam(disc.parameters(), cfg.lr, betas=betas))


def reconstruct(model: VQModel, maps: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(maps.to(next(model.parameters()).dtype))[0]


def reconstruction_report(model: VQModel, items, lights: LightingSet | None = None) -> MetricsReport:
    x = stack_maps(items, next(model.parameters()).dtype)
    rec = reconstruct(model, x)
    reports = [score(MaterialMaps.from_tensor(r), MaterialMaps.from_tensor(t), lights)
               for r, t in zip(rec, x)]
    return MetricsReport.mean(reports)


def train_vq(cfg: TrainConfig, items: list[DatasetItem], eval_items: list[DatasetItem] | None = None,
             eval_every: int = 0, out_dir: str | Path | None = None) -> VQRun:
    """Adam on encoders, codebooks and decoder; hinge discriminator once the adversarial phase starts."""
    if not items:
        raise ValueError("empty training set")
    run = new_vq_run(cfg)
    model, disc = run.model, run.discriminator
    dtype = cfg.torch_dtype
    feats = RandomFeatures().to(dtype)
    weights = cfg.loss_weights()
    data = stack_maps(items, dtype)
    rng = np.random.default_rng([cfg.seed, 7])
    gen = torch.Generator().manual_seed(cfg.seed)
    adv_start = int(cfg.adv_start_fraction * cfg.iterations)
    b = min(cfg.batch_size, len(items))
    if cfg.codebook_init == "data":
        with torch.no_grad():
            for book, z in zip(model.codebooks, model.encode(data)):
                book.init_from(z.permute(0, 2, 3, 1).reshape(-1, book.dim), gen)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        idx = rng.choice(len(items), size=b, replace=False)
        x = data[idx]
        lights = LightingSet(items[int(idx[0])].lights.configs[: cfg.lights])
        latents = model.encode(x)
        z_q, qs = model.quantize(latents)
        rec = model.decode(z_q)
        adv_on = cfg.use_adversarial and it >= adv_start
        loss = compression_loss(x, rec, qs, weights, lights, feats, disc, adv_on)
        total = loss.total
        if adv_on and cfg.adv_adaptive:
            rec_term = loss.pixel + weights.render * loss.render + weights.perceptual * loss.perceptual
            lam = adaptive_adversarial_weight(rec_term, loss.adversarial, model.decoder.out.weight)
            total = total + (lam - 1.0) * weights.adversarial * loss.adversarial
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite VQ loss at iteration {it}")
        run.opt_g.zero_grad()
        total.backward()
        run.opt_g.step()
        if adv_on:
            d_loss = hinge_d_loss(disc(x), disc(rec.detach()))
            run.opt_d.zero_grad()
            d_loss.backward()
            run.opt_d.step()
        for book, z, q in zip(model.codebooks, latents, qs):
            book.record_usage(q.indices)
            book.reseed_dead(z.detach().permute(0, 2, 3, 1).reshape(-1, book.dim),
                             model.config.dead_after, gen)
        f = loss.as_floats()
        run.curve.append((it, float(total.detach()), f["pixel"], f["render"], f["perceptual"],
                          f["adversarial"], f["q"], f["c"]))
        run.iteration = it + 1
        if eval_items and eval_every and (it + 1) % eval_every == 0:
            rep = reconstruction_report(model, eval_items)
            run.reports.append(replace(rep, iteration=it + 1, wall_clock=time.perf_counter() - t0))
            log.info("vq iter %d: %s", it + 1, rep.values())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics_vq.csv").write_text(run.csv_text())
        save_vq(out / "vq.ckpt", run)
    return run


def vq_tensors(run: VQRun) -> tuple[dict, dict[str, torch.Tensor]]:
    tensors = {f"model.{k}": v for k, v in run.model.state_dict().items()}
    tensors.update({f"disc.{k}": v for k, v in run.discriminator.state_dict().items()})
    meta_g, t_g = optimizer_tensors(run.opt_g, "opt_g")
    meta_d, t_d = optimizer_tensors(run.opt_d, "opt_d")
    tensors.update(t_g)
    tensors.update(t_d)
    header = {"config": run.config.to_dict(), "iteration": run.iteration, "format": 1,
              "opt_g": meta_g, "opt_d": meta_d}
    return header, tensors


def save_vq(path: str | Path, run: VQRun) -> None:
    header, tensors = vq_tensors(run)
    write_checkpoint(path, VQ_MAGIC, header, tensors)


def load_vq(path: str | Path) -> VQRun:
    header, tensors = read_checkpoint(path, VQ_MAGIC)
    cfg = TrainConfig.from_dict(header["config"])
    run = new_vq_run(cfg)
    dtype = cfg.torch_dtype
    run.model.load_state_dict({k[6:]: v.to(dtype) for k, v in tensors.items() if k.startswith("model.")})
    run.discriminator.load_state_dict({k[5:]: v.to(dtype) for k, v in tensors.items() if k.startswith("disc.")})
    load_optimizer(run.opt_g, "opt_g", header["opt_g"], tensors)
    load_optimizer(run.opt_d, "opt_d", header["opt_d"], tensors)
    run.iteration = header["iteration"]
    return run


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------- diffusion stage


@dataclass
class DMRun:
    config: TrainConfig
    net: Denoiser
    opt: torch.optim.Optimizer
    iteration: int = 0
    curve: list[tuple] = field(default_factory=list)

    def csv_text(self) -> str:
        return curve_csv(DM_CSV_HEADER, self.curve)


def new_dm_run(cfg: TrainConfig, latent_channels: int, downsample: int) -> DMRun:
    torch.manual_seed(cfg.seed)
    ucfg = UNetConfig(latent_channels=latent_channels, local_channels=8, widths=cfg.unet_widths,
                      context_dim=cfg.context_dim)
    net = Denoiser(ucfg, cfg.schedule(), downsample).to(cfg.torch_dtype)
    opt = torch.optim.AdamW(net.parameters(), cfg.lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    return DMRun(cfg, net, opt)


def warmup_lr(cfg: TrainConfig, step: int) -> float:
    n = max(1, int(cfg.warmup_fraction * cfg.iterations))
    return cfg.warmup_start_lr + (cfg.lr - cfg.warmup_start_lr) * min(1.0, step / n)


def item_latents(vq: VQModel, items, dtype) -> torch.Tensor:
    return vq.latents(stack_maps(items, next(vq.parameters()).dtype)).to(dtype)


def train_diffusion(cfg: TrainConfig, vq: VQModel, items: list[DatasetItem],
                    out_dir: str | Path | None = None, resume: DMRun | None = None) -> DMRun:
    """Joint denoiser + condition-encoder training on frozen, quantized VQ latents.

    With ``resume``, training continues that run from its iteration count up to
    ``cfg.iterations``. Batches and noise come from per-iteration streams, so a
    resumed run matches an uninterrupted one.
    """
    if not items:
        raise ValueError("empty training set")
    if items[0].maps.resolution % vq.config.downsample:
        raise ValueError("dataset resolution incompatible with the VQ downsampling factor")
    vq.eval()
    vq.requires_grad_(False)
    dtype = cfg.torch_dtype
    z0_all = item_latents(vq, items, dtype)
    if z0_all.shape[1] != vq.config.total_channels:
        raise ValueError("latent channel count does not match the VQ checkpoint")
    if resume is None:
        run = new_dm_run(cfg, z0_all.shape[1], vq.config.downsample)
        run.net.latent_scale.fill_(1.0 / float(z0_all.std()))
    else:
        mismatch = [k for k, v in cfg.to_dict().items()
                    if k != "iterations" and resume.config.to_dict()[k] != v]
        if mismatch:
            raise ValueError(f"resume config differs in {mismatch}")
        if resume.net.unet.cfg.latent_channels != z0_all.shape[1]:
            raise ValueError("latent channel count does not match the resumed checkpoint")
        if resume.iteration > cfg.iterations:
            raise ValueError(f"run is already at iteration {resume.iteration} > {cfg.iterations}")
        run = resume
        run.config = cfg
    net = run.net
    start = run.iteration
    z0_all = z0_all * net.latent_scale.to(dtype)
    conds = [[extract_conditions(r) for r in it.renders] for it in items]
    b = cfg.batch_size
    res = items[0].maps.resolution
    for it in range(start, cfg.iterations):
        rng = np.random.default_rng([cfg.seed, 11, it])
        gen = torch.Generator().manual_seed(hash_seed(cfg.seed, 12, it))
        for g in run.opt.param_groups:
            g["lr"] = warmup_lr(cfg, it)
        idx = rng.integers(0, len(items), size=b)
        ridx = rng.integers(0, len(items[0].renders), size=b)
        sets = [drop_conditions(conds[i][r], rng) for i, r in zip(idx, ridx)]
        loss = diffusion_loss(net, z0_all[idx], collate(sets, res, dtype), gen)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite diffusion loss at iteration {it}")
        run.opt.zero_grad()
        loss.backward()
        run.opt.step()
        run.curve.append((it, float(loss.detach())))
        run.iteration = it + 1
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics_dm.csv"
        if resume is not None and csv_path.is_file():
            # append-only: keep earlier rows, add the ones trained now
            new_rows = [r for r in run.curve if r[0] >= start]
            body = curve_csv(DM_CSV_HEADER, new_rows).split("\n", 1)[1]
            with csv_path.open("a") as fh:
                fh.write(body)
        else:
            csv_path.write_text(run.csv_text())
        save_dm(out / "dm.ckpt", run)
    return run


def save_dm(path: str | Path, run: DMRun) -> None:
    tensors = {f"net.{k}": v for k, v in run.net.state_dict().items()}
    meta, t_o = optimizer_tensors(run.opt, "opt")
    tensors.update(t_o)
    header = {"config": run.config.to_dict(), "schedule": run.net.schedule.to_dict(),
              "unet": run.net.unet.cfg.to_dict(), "downsample": run.net.downsample,
              "iteration": run.iteration, "format": 1, "opt": meta}
    write_checkpoint(path, DM_MAGIC, header, tensors)


def load_dm(path: str | Path) -> DMRun:
    header, tensors = read_checkpoint(path, DM_MAGIC)
    cfg = TrainConfig.from_dict(header["config"])
    ucfg = UNetConfig.from_dict(header["unet"])
    run = new_dm_run(cfg, ucfg.latent_channels, header["downsample"])
    run.net.load_state_dict({k[4:]: v.to(cfg.torch_dtype) for k, v in tensors.items() if k.startswith("net.")})
    load_optimizer(run.opt, "opt", header["opt"], tensors)
    run.iteration = header["iteration"]
    return run


def check_compatible(vq: VQModel, net: Denoiser) -> None:
    if net.unet.cfg.latent_channels != vq.config.total_channels or net.downsample != vq.config.downsample:
        raise ValueError("diffusion checkpoint does not match the VQ latent layout")


# -------------------------------------------------------------- generation


def generate(vq: VQModel, net: Denoiser, conds: list[ConditionSet | None], resolution: int,
             sampler: SamplerConfig) -> list[MaterialMaps]:
    """One material per entry of ``conds``; sample i uses seed ``sampler.seed + i``."""
    check_compatible(vq, net)
    dtype = next(net.parameters()).dtype
    h = resolution // vq.config.downsample
    out = []
    for i, cs in enumerate(conds):
        batch = None if cs is None else collate([cs], resolution, dtype)
        z = sample(net, batch, replace(sampler, seed=sampler.seed + i), vq,
                   (1, vq.config.total_channels, h, h))
        with torch.no_grad():
            maps = vq.decode(z)[0].to(torch.float64)
        out.append(MaterialMaps.from_tensor(maps))
    return out


@dataclass
class EvalResult:
    mode: str
    rows: list[tuple[str, MetricsReport]]

    @property
    def mean(self) -> MetricsReport:
        return MetricsReport.mean([r for _, r in self.rows])

    def table(self) -> str:
        return format_table([(name, r.values()) for name, r in self.rows] + [("mean", self.mean.values())])


def evaluate(vq: VQModel, net: Denoiser | None, items: list[DatasetItem], mode: str,
             seed: int = 0, steps: int = 100, reference: list[DatasetItem] | None = None) -> EvalResult:
    """RMSE tables in the (Diff., Nrm., Rgh., Spec., Rend.) layout.

    reconstruction: encode, quantize, decode.
    estimation: condition on the item's first render only, sample, decode.
    unconditional: unconditional sample scored against the item itself.
    sample-quality: unconditional samples scored against their nearest reference material.
    """
    if not items:
        raise ValueError("empty test set")
    lights = heldout_lights()
    res = items[0].maps.resolution
    sampler = SamplerConfig(steps=steps, eta=0.0, seed=seed)
    if mode == "reconstruction":
        x = stack_maps(items, next(vq.parameters()).dtype)
        rec = reconstruct(vq, x)
        preds = [MaterialMaps.from_tensor(r.to(torch.float64)) for r in rec]
    elif mode == "estimation":
        preds = generate(vq, net, [ConditionSet(render=it.renders[0]) for it in items], res, sampler)
    elif mode in ("unconditional", "sample-quality"):
        preds = generate(vq, net, [None] * len(items), res, sampler)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rows = []
    for it, pred in zip(items, preds):
        if mode == "sample-quality":
            rows.append((it.path, nearest_neighbor(pred, reference or items, lights)))
        else:
            rows.append((it.path, score(pred, it.maps, lights)))
    return EvalResult(mode, rows)


def nearest_neighbor(pred: MaterialMaps, reference: list[DatasetItem], lights) -> MetricsReport:
    best = None
    for ref in reference:
        per = rmse(pred, ref.maps)
        total = sum(per.values())
        if best is None or total < best[0]:
            best = (total, ref)
    return score(pred, best[1].maps, lights)


# ----------------------------------------------------------------- tables


def format_table(rows: list[tuple[str, tuple[float, ...]]], title: str = "") -> str:
    width = max([len(r[0]) for r in rows] + [8])
    lines = [title] if title else []
    lines.append(f"{'':<{width}}  " + "  ".join(f"{c:>7}" for c in COLUMNS))
    for name, vals in rows:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{v:7.4f}" for v in vals))
    return "\n".join(lines)


def table_csv(rows: list[tuple[str, tuple[float, ...]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("arm",) + COLUMNS)
    for name, vals in rows:
        w.writerow([name] + [f"{v:.6f}" for v in vals])
    return buf.getvalue()


def material_row(maps: MaterialMaps) -> np.ndarray:
    """diffuse | normal | roughness | specular | rendering, side by side."""
    tiles = [m.detach().to(torch.float64).numpy() for m in maps.maps()]
    tiles.append(preview(MaterialMaps(*(m.detach().to(torch.float64) for m in maps.maps()))).numpy())
    return np.concatenate(tiles, axis=1)


def material_grid(rows: list[MaterialMaps]) -> np.ndarray:
    return np.concatenate([material_row(m) for m in rows], axis=0)


# --------------------------------------------------------------- ablation


@dataclass
class AblationProfile:
    materials: int = 8
    resolution: int = 32
    max_crop_level: int = 0
    iterations: int = 1500
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset_seed: int = 2024
    base_sizes: tuple[int, ...] = (64, 128, 256)
    multi_size: int = 256


ARCHITECTURE_ARMS = ("Base ({})", "Multi Enc.")
LOSS_ARMS = ("L_pixel", "+L_adv", "+L_perc", "+L_rend")


def loss_arm_flags(arm: str) -> dict:
    level = LOSS_ARMS.index(arm)
    return {"use_adversarial": level >= 1, "use_perceptual": level >= 2, "use_render": level >= 3}


@dataclass
class AblationResult:
    suite: str
    arms: list[str]
    per_seed: dict[str, list[MetricsReport]]
    grids: dict[str, np.ndarray]

    def means(self) -> list[tuple[str, MetricsReport]]:
        return [(a, MetricsReport.mean(self.per_seed[a])) for a in self.arms]

    def table(self) -> str:
        rows = [(a, r.values()) for a, r in self.means()]
        ref = REFERENCE_ARCHITECTURE if self.suite == "architecture" else REFERENCE_LOSSES
        ref_rows = [(k, v) for k, v in ref.items()]
        return (format_table(rows, f"{self.suite} ablation (desk scale, seed mean)") + "\n\n"
                + format_table(ref_rows, "full-scale reference"))

    def csv(self) -> str:
        return table_csv([(a, r.values()) for a, r in self.means()])

    def to_json(self) -> dict:
        return {
            "suite": self.suite,
            "columns": list(COLUMNS),
            "mean": {a: list(r.values()) for a, r in self.means()},
            "per_seed": {a: [list(r.values()) for r in rs] for a, rs in self.per_seed.items()},
        }


def ablation_arms(suite: str, profile: AblationProfile) -> list[tuple[str, dict]]:
    if suite == "architecture":
        arms = [(f"Base ({v})", {"codebook_mode": "single", "codebook_size": v}) for v in profile.base_sizes]
        arms.append(("Multi Enc.", {"codebook_mode": "multi", "codebook_size": profile.multi_size}))
        return arms
    if suite == "losses":
        return [(a, {"codebook_mode": "multi", "codebook_size": profile.multi_size, **loss_arm_flags(a)})
                for a in LOSS_ARMS]
    raise ValueError(f"unknown ablation suite {suite!r}")


_ABLATION_CACHE: dict[tuple, tuple[MetricsReport, MaterialMaps]] = {}


def run_ablation(suite: str, profile: AblationProfile | None = None,
                 dataset: ToyDataset | None = None) -> AblationResult:
    """Equal-budget VQ arms over a fixed dataset; reconstruction RMSE on the training crops."""
    profile = profile or AblationProfile()
    ds = dataset or build_toy_dataset(profile.dataset_seed, profile.materials, profile.resolution,
                                      profile.max_crop_level)
    items = ds.items
    arms = ablation_arms(suite, profile)
    per_seed: dict[str, list[MetricsReport]] = {}
    grids: dict[str, np.ndarray] = {}
    for name, overrides in arms:
        per_seed[name] = []
        for seed in profile.seeds:
            cfg = vq_defaults(resolution=profile.resolution, iterations=profile.iterations,
                              seed=seed, **overrides)
            key = (json.dumps(cfg.to_dict(), sort_keys=True), ds.manifest(), ds.seed)
            if key not in _ABLATION_CACHE:
                run = train_vq(cfg, items)
                rep = reconstruction_report(run.model, items)
                first = MaterialMaps.from_tensor(
                    reconstruct(run.model, stack_maps(items[:1], cfg.torch_dtype))[0].to(torch.float64))
                _ABLATION_CACHE[key] = (rep, first)
                log.info("ablation %s seed %d: %s", name, seed, rep.values())
            rep, first = _ABLATION_CACHE[key]
            per_seed[name].append(rep)
            if seed == profile.seeds[0]:
                grids[name] = material_row(first)
    grids["GT"] = material_row(items[0].maps)
    return AblationResult(suite, [a for a, _ in arms], per_seed, grids)
