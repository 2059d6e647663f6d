"""End-to-end command runs on a tiny dataset, config handling and exit codes."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from splattex import cli
from splattex.dataset import Dataset
from splattex.gaussians import SH_C0, load_gaussians, save_gaussians
from splattex.mesh import bake_position_texture
from splattex.renderer import read_ppm
from splattex.transformer.checkpoint import load_checkpoint

TINY = {"identities": 1, "expressions": 3, "views": 2, "heldout_views": 1, "image_size": [32, 32],
        "uv_size": 32, "resolution": 12}
MODEL = {"d": 16, "heads": 2, "p_uv": 4, "p_img": 8, "k": 8}


def sets(d: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        out += ["--set", f"{prefix}{k}={json.dumps(v)}"]
    return out


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--set", f"out={root}"] + sets(TINY, "data.")) == 0
    return root


def train_args(data, out, **train):
    t = {"iterations": 4, "warmup": 1, "log_every": 1, "checkpoint_every": 2, **train}
    return ["train", "--set", f"data={data}", "--set", f"out={out}", "--set", "frames=[0]"] + \
        sets(MODEL, "model.") + sets(t, "train.")


def read_loss(path):
    with open(path) as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_overrides_and_file_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"lr": 0.5}, "frames": [1]}))
    cfg = cli.resolve_config("train", str(p), ["train.iterations=7", "out=x", "model.blocks=[\"reg\",\"grp\"]"])
    assert cfg["train"] == {"lr": 0.5, "iterations": 7} and cfg["frames"] == [1] and cfg["out"] == "x"
    assert cfg["model"]["blocks"] == ["reg", "grp"]
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("train", None, ["nonsense=1"])
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("train", None, ["no-equals-sign"])


def test_exit_codes(tmp_path, data, capsys):
    assert cli.main(["train", "--set", "bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--set", f"data={tmp_path / 'missing'}"]) == cli.EXIT_DATA
    assert cli.main(["train", "--set", f"data={data}", "--set", "train.lr=-1"]) == cli.EXIT_CONFIG
    assert cli.main(["infer", "--set", f"data={data}", "--set", f"checkpoint={tmp_path / 'none.bin'}"]) == cli.EXIT_DATA
    assert "config error" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, data, monkeypatch):
    from splattex.transformer import train as tr

    def boom(*a, **k):
        raise tr.NonFiniteError("loss is non-finite (first non-finite tensor: head.w)")
    monkeypatch.setattr(tr, "train", boom)
    assert cli.main(train_args(data, tmp_path / "r")) == cli.EXIT_NUMERIC


def test_config_is_echoed(tmp_path, data, capsys):
    cli.main(train_args(data, tmp_path / "r", iterations=1))
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("# train config: ") and json.loads(first.split(": ", 1)[1])["frames"] == [0]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def test_gen_data_counts_and_determinism(tmp_path, data):
    ds = Dataset(data)
    images = sorted(data.glob("frame_*/images/view_*.ppm"))
    assert len(images) == 3 * 2
    assert read_ppm(images[0]).shape == (32, 32, 3)
    cli.main(["gen-data", "--set", f"out={tmp_path / 'again'}"] + sets(TINY, "data."))
    again = json.loads((tmp_path / "again/manifest.json").read_text())
    assert again["files"] == ds.manifest["files"]


def test_train_lr_zero_gives_flat_loss(tmp_path, data):
    assert cli.main(train_args(data, tmp_path / "r", lr=0.0)) == 0
    losses = read_loss(tmp_path / "r/loss.csv")
    assert len(losses) == 4 and len(set(losses)) == 1
    assert (tmp_path / "r/loss.png").exists() and (tmp_path / "r/checkpoint_000002.bin").exists()


def test_resume_reproduces_next_loss_bit_exactly(tmp_path, data):
    cli.main(train_args(data, tmp_path / "full"))
    cli.main(train_args(data, tmp_path / "part", iterations=4))
    cli.main(train_args(data, tmp_path / "resumed") + ["--set", f"resume={tmp_path / 'part/checkpoint_000002.bin'}"])
    full = read_loss(tmp_path / "full/loss.csv")
    resumed = read_loss(tmp_path / "resumed/loss.csv")
    assert resumed == full[2:]
    _, _, a = load_checkpoint(tmp_path / "full/checkpoint.bin")
    _, _, b = load_checkpoint(tmp_path / "resumed/checkpoint.bin")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_one_frame_overfit_run(tmp_path, data):
    assert cli.main(train_args(data, tmp_path / "r", iterations=300, warmup=10, log_every=10,
                               checkpoint_every=0)) == 0
    losses = read_loss(tmp_path / "r/loss.csv")
    assert losses[-1] <= 0.1 * losses[0]


def read_ply(path):
    """Independent binary PLY reader: parse the header, then a structured array."""
    raw = path.read_bytes()
    head, body = raw.split(b"end_header\n", 1)
    lines = head.decode().splitlines()
    assert lines[0] == "ply" and lines[1] == "format binary_little_endian 1.0"
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    names = [l.split()[-1] for l in lines if l.startswith("property float")]
    return np.frombuffer(body, dtype=[(nm, "<f4") for nm in names], count=n)


def test_infer_zero_head_matches_coarse_bake(tmp_path, data):
    cli.main(train_args(data, tmp_path / "r", lr=0.0, iterations=1))
    out = tmp_path / "inf"
    assert cli.main(["infer", "--set", f"data={data}", "--set", f"checkpoint={tmp_path / 'r/checkpoint.bin'}",
                     "--set", f"out={out}", "--set", "frame=1"]) == 0
    g = load_gaussians(out / "gaussians.bin")
    fr = Dataset(data).load(1)
    bake = bake_position_texture(fr.coarse_mesh, 32, 32)
    assert np.array_equal(g.valid, bake.valid)
    # the texture container stores float32
    assert np.array_equal(g.position[g.valid], bake.values[bake.valid].astype(np.float32))
    ply = read_ply(out / "gaussians.ply")
    assert len(ply) == g.n_valid
    v = g.valid
    f32 = lambda x: np.asarray(x, np.float32)
    assert np.array_equal(np.c_[ply["x"], ply["y"], ply["z"]], f32(g.position[v]))
    assert np.allclose(ply["f_dc_0"], (g.color[v][:, 0] - 0.5) / SH_C0, rtol=1e-6)
    assert np.allclose(1 / (1 + np.exp(-ply["opacity"].astype(float))), g.opacity[v], rtol=1e-6)
    assert np.allclose(np.exp(ply["scale_1"].astype(float)), g.scale[v][:, 1], rtol=1e-6)
    assert np.array_equal(np.c_[ply["rot_0"], ply["rot_1"], ply["rot_2"], ply["rot_3"]], f32(g.rotation[v]))


def test_eval_ground_truth_mode(tmp_path, data):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--set", f"data={data}", "--set", "mode=gt", "--set", f"out={out}"]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["mean"]["psnr"] == 99.0 and m["mean"]["p2p_mm"] == 0.0 and m["mean"]["ssim"] == 1.0
    keys = {"frame", "psnr", "ssim", "l1", "l2", "p2p_mm", "p2s_mm", "coarse_p2p_mm", "coarse_p2s_mm",
            "extraction_p2p_mm"}
    assert all(set(r) == keys for r in m["per_frame"])
    assert m["mean"]["extraction_p2p_mm"] > 0
    # coarse P2P near the noise statistic sigma * sqrt(8 / pi)
    assert 0.5 * 3.0 * np.sqrt(8 / np.pi) < m["mean"]["coarse_p2p_mm"] < 1.5 * 3.0 * np.sqrt(8 / np.pi)


def test_avatar_command(tmp_path, data):
    out = tmp_path / "av"
    assert cli.main(["avatar", "--set", f"data={data}", "--set", f"out={out}"]) == 0
    rep = json.loads((out / "avatar_report.json").read_text())
    errs = [r["error_std"] for r in rep["k_sweep"]]
    assert rep["K"] == 2 and errs[-1] < 1e-5
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert (out / "gem.bin").exists() and (out / "k_sweep.png").exists() and (out / "coefficients.csv").exists()


def test_edit_commands(tmp_path, data):
    ds = Dataset(data)
    a, b = ds.load(0).gt, ds.load(1).gt
    save_gaussians(tmp_path / "a.bin", a)
    save_gaussians(tmp_path / "b.bin", b)
    base = ["--set", f"a={tmp_path / 'a.bin'}", "--set", f"b={tmp_path / 'b.bin'}",
            "--set", f"cameras={data / 'cameras.json'}"]
    for op, extra in (("interpolate", ["--set", "gamma=0"]), ("swap", []),
                      ("transfer", ["--set", f"c={tmp_path / 'b.bin'}"])):
        out = tmp_path / op
        assert cli.main(["edit", "--set", f"op={op}", "--set", f"out={out}"] + base + extra) == 0
        g = load_gaussians(out / "edited.bin")
        assert np.array_equal(g.as_array()[g.valid], a.as_array()[a.valid]), op
        assert (out / "preview_01.ppm").exists()
    assert cli.main(["edit", "--set", "op=transfer"] + base) == cli.EXIT_CONFIG


def test_bench_command_small(tmp_path):
    out = tmp_path / "b"
    bench = {"views": [2, 4], "uv_grid": [4, 4], "img_grid": [4, 4], "k": 8, "d": 8, "runs": 5}
    assert cli.main(["bench-attention", "--set", f"out={out}"] + sets(bench, "bench.")) == 0
    with open(out / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["V"]) for r in rows] == [2, 4] and set(rows[0]) == {"V", "dense_ms", "guided_ms", "ratio"}
    assert (out / "bench.png").exists()


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "splattex", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
