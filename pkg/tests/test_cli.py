import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from matgen.cli import main
from matgen.conditioning import extract_palette, write_palette
from matgen.material import save_image, save_material
from matgen.pipeline import (
    build_toy_dataset, dm_defaults, save_dm, save_vq, train_diffusion, train_vq, vq_defaults,
)


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    ds = build_toy_dataset(0, 2, 32, 0, lights=2)
    vq = train_vq(vq_defaults(iterations=2, vq_widths=(8, 8, 8), codebook_size=64, batch_size=2, lights=2),
                  ds.items)
    dm = train_diffusion(dm_defaults(iterations=2, unet_widths=(16, 32), context_dim=16, batch_size=2),
                         vq.model, ds.items)
    save_vq(root / "vq.ckpt", vq)
    save_dm(root / "dm.ckpt", dm)
    item = ds.items[0]
    save_material(item.maps, root / "truth")
    save_image(root / "render.png", item.renders[0])
    save_image(root / "sketch.png", np.eye(32))
    write_palette(root / "palette.txt", extract_palette(item.renders[0]))
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def error_of(err):
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"error", "message", "exit"}
    return payload


def models(ckpts):
    return ["--ckpt-vq", ckpts / "vq.ckpt", "--ckpt-dm", ckpts / "dm.ckpt"]


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "render", "--material", "x", "--out", "y.png", "--bogus")
    assert code == 1 and error_of(err)["error"] == "usage"


def test_missing_verb(capsys):
    code, _, err = run(capsys)
    assert code == 1 and error_of(err)["exit"] == 1


def test_validation_error_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "render", "--material", tmp_path / "nowhere", "--out", tmp_path / "r.png")
    assert code == 1 and "missing map" in error_of(err)["message"]


def test_runtime_failure_exit_2(capsys, tmp_path, monkeypatch):
    import matgen.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "build_toy_dataset", boom)
    code, _, err = run(capsys, "dataset", "--out", tmp_path)
    assert code == 2 and error_of(err) == {"error": "RuntimeError", "message": "disk on fire", "exit": 2}


def test_dataset_and_render(capsys, tmp_path):
    code, out, _ = run(capsys, "dataset", "--count", 2, "--resolution", 16, "--out", tmp_path / "ds")
    assert code == 0 and "2 crops" in out
    mat = tmp_path / "ds" / "mat000" / "l0_0_0"
    code, _, _ = run(capsys, "render", "--material", mat, "--light", "0.2,0.1,1.5", "--out", tmp_path / "r.png")
    assert code == 0 and np.asarray(Image.open(tmp_path / "r.png")).shape == (16, 16, 3)
    code, _, err = run(capsys, "render", "--material", mat, "--light", "0,0", "--out", tmp_path / "r.png")
    assert code == 1
    code, _, err = run(capsys, "render", "--material", mat, "--light", "0,0,-1", "--out", tmp_path / "r.png")
    assert code == 1 and "above the surface" in error_of(err)["message"]


def test_train_commands_echo_config(capsys, tmp_path):
    code, out, _ = run(capsys, "train-vq", "--iterations", 2, "--count", 2, "--batch-size", 2,
                       "--codebook-size", 64, "--no-adversarial", "--out", tmp_path / "vq")
    assert code == 0
    echo = json.loads(out.splitlines()[0][len("config "):])
    assert echo["train"]["iterations"] == 2 and echo["train"]["use_adversarial"] is False
    assert json.loads((tmp_path / "vq" / "config.json").read_text()) == echo
    assert (tmp_path / "vq" / "metrics_vq.csv").read_text().count("\n") == 3
    code, out, _ = run(capsys, "train-dm", "--ckpt-vq", tmp_path / "vq" / "vq.ckpt", "--iterations", 2,
                       "--count", 2, "--out", tmp_path / "dm")
    assert code == 0 and (tmp_path / "dm" / "dm.ckpt").is_file()
    assert (tmp_path / "dm" / "metrics_dm.csv").read_text().startswith("iter,loss_diff")
    code, out, _ = run(capsys, "train-dm", "--ckpt-vq", tmp_path / "vq" / "vq.ckpt", "--iterations", 3,
                       "--count", 2, "--resume", tmp_path / "dm" / "dm.ckpt", "--out", tmp_path / "dm")
    assert code == 0 and "at iteration 3" in out
    assert (tmp_path / "dm" / "metrics_dm.csv").read_text().count("\n") == 4


def test_train_config_file(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"iterations": 1, "batch_size": 2, "codebook_size": 64}))
    code, out, _ = run(capsys, "train-vq", "--config", tmp_path / "c.json", "--count", 2, "--out", tmp_path / "o")
    assert code == 0 and json.loads(out.splitlines()[0][7:])["train"]["codebook_size"] == 64
    (tmp_path / "bad.json").write_text(json.dumps({"iterationz": 1}))
    code, _, err = run(capsys, "train-vq", "--config", tmp_path / "bad.json", "--out", tmp_path / "o2")
    assert code == 1 and "unknown config keys" in error_of(err)["message"]


def test_generate_unconditional_and_reproducible(capsys, tmp_path, ckpts):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "generate", *models(ckpts), "--steps", 3, "--seed", 5, "--out", tmp_path / d)
        assert code == 0 and "unconditional" in out
    for name in ("diffuse", "normal", "roughness", "specular", "preview"):
        a = (tmp_path / "a" / "sample_000" / f"{name}.png").read_bytes()
        assert a == (tmp_path / "b" / "sample_000" / f"{name}.png").read_bytes()


def test_generate_sketch_and_palette(capsys, tmp_path, ckpts):
    code, out, _ = run(capsys, "generate", *models(ckpts), "--sketch", ckpts / "sketch.png",
                       "--palette", ckpts / "palette.txt", "--steps", 3, "--out", tmp_path)
    assert code == 0 and out.strip().endswith("conditions palette,sketch")


def test_generate_grid_and_all_conditions(capsys, tmp_path, ckpts):
    code, out, _ = run(capsys, "generate", *models(ckpts), "--sample", ckpts / "render.png", "--sample-palette",
                       "--estimate-from", ckpts / "render.png", "--sketch", ckpts / "sketch.png",
                       "--grid", 2, "--steps", 2, "--out", tmp_path)
    assert code == 0 and "embedding,palette,sketch,render" in out
    grid = np.asarray(Image.open(tmp_path / "grid.png"))
    assert grid.shape == (64, 160, 3)


def test_generate_rejects_bad_inputs(capsys, tmp_path, ckpts):
    save_image(tmp_path / "big.png", np.zeros((64, 64)))
    code, _, err = run(capsys, "generate", *models(ckpts), "--sketch", tmp_path / "big.png", "--out", tmp_path)
    assert code == 1 and "resolution" in error_of(err)["message"]
    code, _, err = run(capsys, "generate", *models(ckpts), "--sketch", tmp_path / "none.png", "--out", tmp_path)
    assert code == 1
    code, _, err = run(capsys, "generate", "--ckpt-vq", ckpts / "dm.ckpt", "--ckpt-dm", ckpts / "dm.ckpt",
                       "--out", tmp_path)
    assert code == 1 and "magic" in error_of(err)["message"]


def test_estimate(capsys, tmp_path, ckpts):
    code, out, _ = run(capsys, "estimate", *models(ckpts), "--input", ckpts / "render.png",
                       "--truth", ckpts / "truth", "--steps", 3, "--out", tmp_path / "e")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].split() == ["Diff.", "Nrm.", "Rgh.", "Spec.", "Rend."]
    values = [float(v) for v in lines[1].split()]
    assert len(values) == 5 and all(v >= 0 for v in values)
    assert lines[2] == "reference (full scale): 0.021/0.028/0.024/0.023/0.044"
    code, out, _ = run(capsys, "estimate", *models(ckpts), "--input", ckpts / "render.png", "--steps", 3,
                       "--out", tmp_path / "f")
    assert code == 0 and out.strip() == ""
    assert (tmp_path / "f" / "diffuse.png").is_file()


def test_eval_json(capsys, ckpts):
    code, out, _ = run(capsys, "eval", "--ckpt-vq", ckpts / "vq.ckpt", "--mode", "reconstruction",
                       "--count", 2, "--json")
    payload = json.loads(out)
    assert code == 0 and payload["columns"] == ["Diff.", "Nrm.", "Rgh.", "Spec.", "Rend."]
    assert len(payload["mean"]) == 5
    code, _, err = run(capsys, "eval", "--ckpt-vq", ckpts / "vq.ckpt", "--mode", "estimation", "--count", 2)
    assert code == 1 and "--ckpt-dm" in error_of(err)["message"]


def test_gradcheck_exit_codes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "renderer")
    assert code == 0 and "worst=" in out and "diffuse" in out
    code, out, _ = run(capsys, "gradcheck", "--target", "attention", "--corrupt-gradient")
    assert code == 1 and "FAIL" in out
    code, _, err = run(capsys, "gradcheck", "--target", "optimizer")
    assert code == 1 and error_of(err)["error"] == "usage"


def test_ablate_validation(capsys):
    code, _, err = run(capsys, "ablate", "--suite", "losses", "--seeds", 0)
    assert code == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "matgen.cli", "render", "--nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["error"] == "usage"
    help_text = subprocess.run([sys.executable, "-m", "matgen.cli", "generate", "--help"],
                               capture_output=True, text=True).stdout
    for flag in ("--sketch", "--palette", "--sample", "--estimate-from", "--grid", "--seed"):
        assert flag in help_text
