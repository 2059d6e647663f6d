"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed in the "acceptance criteria" section at the end of the session.
The desk-scale training run and noise sweep (criteria 4 and 8) take about 30 minutes.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from micro import gradient_suite
from oracles import random_block, reg_guided_reference, score_by_counting
from splattex import cli
from splattex.avatar import (
    SkinningRig, canonicalize, expression_transfer, fit_coefficients, gem_reconstruct, interpolate,
    pca_fit, pose, reconstruction_errors, region_swap, truncate,
)
from splattex.core_math import Camera, CameraIntrinsics, RigidPose, axis_angle_to_quat
from splattex.correspondence import PixelBox, RegionOfInterest, correspondence_score
from splattex.gaussians import GaussianTexture
from splattex.renderer import image_metrics, render
from splattex.synthdata import ExpressionSpec, IdentitySpec, bake_gt_frame, gen_identity
from splattex.transformer.model import reg_guided_block_fwd

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LAM = 0.1


# ---------------------------------------------------------------------------
# 1. correspondence score against pixel counting
# ---------------------------------------------------------------------------

def random_region_and_box(rng, H=32, W=40):
    bitmap = np.zeros((H, W), bool)
    for _ in range(rng.integers(0, 5)):
        r0, c0 = rng.integers(0, H), rng.integers(0, W)
        bitmap[r0:r0 + rng.integers(1, 14), c0:c0 + rng.integers(1, 16)] = True
    bitmap &= rng.random((H, W)) < rng.uniform(0.3, 1.0)
    r0, c0 = int(rng.integers(0, H - 1)), int(rng.integers(0, W - 1))
    return bitmap, (r0, c0, int(rng.integers(r0 + 1, H + 1)), int(rng.integers(c0 + 1, W + 1)))


@pytest.mark.criterion(1)
def test_criterion_1_score_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        bitmap, box = random_region_and_box(rng)
        got = correspondence_score(RegionOfInterest.from_bitmap(bitmap), PixelBox(*box), LAM)
        worst = max(worst, abs(got - score_by_counting(bitmap, box, LAM)))
    square = np.zeros((24, 24), bool)
    square[4:12, 8:16] = True
    coincident = correspondence_score(RegionOfInterest.from_bitmap(square), PixelBox(4, 8, 12, 16), LAM)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and coincident == 1.0 + LAM and seconds < 10
    report(1, ok, f"max |score - count| {worst:.1e}, coincident {coincident!r}, {seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. registration-guided block against per-group attention
# ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_criterion_2_attention_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 5))
        n_uv, n_img = int(rng.integers(1, 7)), int(rng.integers(1, 13))
        k = int(rng.integers(1, n_img + 1))
        p = random_block(rng, d)
        x_uv, x_img = rng.normal(size=(n_uv, d)), rng.normal(size=(n_img, d))
        table = np.stack([rng.choice(n_img, k, replace=False) for _ in range(n_uv)])
        new_uv, new_img, _ = reg_guided_block_fwd(x_uv, x_img, table, p, heads)
        ref_uv, ref_img = reg_guided_reference(x_uv, x_img, table, p, heads)
        worst = max(worst, np.abs(new_uv - ref_uv).max(), np.abs(new_img - ref_img).max())
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and seconds < 30
    report(2, ok, f"max deviation {worst:.1e} over 50 configurations, {seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. finite-difference gradient suite
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_criterion_3_gradient_suite(report):
    t0 = time.perf_counter()
    errors, grads = gradient_suite()
    seconds = time.perf_counter() - t0
    name = max(errors, key=errors.get)
    ok = len(errors) == len(grads) and errors[name] < 1e-4 and seconds < 300
    report(3, ok, f"worst relative error {errors[name]:.2e} ({name}) over {len(errors)} tensors, {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4 and 8. desk-scale training and the noise sweep on its checkpoint
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert cli.main(["gen-data", "--set", f"out={root / 'data'}"]) == 0
    assert cli.main(["train", "--config", str(CONFIGS / "desk_train.json"),
                     "--set", f"data={root / 'data'}", "--set", f"out={root / 'run'}"]) == 0
    train_seconds = time.perf_counter() - t0
    assert cli.main(["eval", "--set", f"data={root / 'data'}", "--set", f"checkpoint={root / 'run/checkpoint.bin'}",
                     "--set", f"out={root / 'eval'}", "--set", "render=false",
                     "--set", "sigma_sweep_mm=[3, 10, 20]"]) == 0
    summary = json.loads((root / "run/train_summary.json").read_text())
    metrics = json.loads((root / "eval/metrics.json").read_text())
    return {"summary": summary, "metrics": metrics, "seconds": train_seconds}


@pytest.mark.criterion(4)
def test_criterion_4_training_beats_coarse_input(desk_run, report):
    s, m = desk_run["summary"], desk_run["metrics"]["mean"]
    ratio = m["p2s_mm"] / m["coarse_p2s_mm"]
    fall = s["geometry_loss_fall"]
    ok = s["steps"] <= 5000 and ratio <= 0.5 and fall >= 10 and desk_run["seconds"] < 1800
    report(4, ok, f"P2S {m['p2s_mm']:.3f} mm vs coarse {m['coarse_p2s_mm']:.3f} mm (ratio {ratio:.3f}, need <= 0.5), "
                  f"geometry loss fall {fall:.2f}x (need >= 10), {s['steps']} steps, {desk_run['seconds']:.0f}s")
    assert ok


@pytest.mark.criterion(8)
def test_criterion_8_noise_sweep(desk_run, report):
    sweep = desk_run["metrics"]["sigma_sweep"]
    pred = [r["p2s_pred_mm"] for r in sweep]
    coarse = [r["p2s_coarse_mm"] for r in sweep]
    monotone = all(b > a for a, b in zip(pred, pred[1:]))
    below = all(p < c for p, c, r in zip(pred, coarse, sweep) if r["sigma_mm"] <= 10)
    ok = monotone and below
    pairs = ", ".join(f"{r['sigma_mm']:g} mm: {p:.2f}/{c:.2f}" for r, p, c in zip(sweep, pred, coarse))
    report(8, ok, f"P2S pred/coarse {pairs}")
    assert ok


# ---------------------------------------------------------------------------
# 5. attention scaling at full-size token counts
# ---------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_criterion_5_attention_scaling(tmp_path, report):
    t0 = time.perf_counter()
    assert cli.main(["bench-attention", "--set", f"out={tmp_path}", "--set", "bench.views=[4, 16]"]) == 0
    seconds = time.perf_counter() - t0
    res = json.loads((tmp_path / "bench.json").read_text())
    g = res["growth_4_to_16"]
    ratio16 = next(r["ratio"] for r in res["rows"] if r["V"] == 16)
    ok = g["guided"] < g["dense"] and ratio16 >= 1.3 and seconds < 600
    report(5, ok, f"growth V=4->16 dense {g['dense']:.2f}x guided {g['guided']:.2f}x, "
                  f"dense/guided at V=16 {ratio16:.2f}, {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. joint PCA model and skinning round trips
# ---------------------------------------------------------------------------

def synthetic_frames(n=7, uv=32):
    ident = gen_identity(IdentitySpec(0, resolution=16))
    return [bake_gt_frame(ident, ExpressionSpec.random(0, i), [], uv, 0.0).gt for i in range(n)]


def random_rigid(rng):
    q = axis_angle_to_quat(rng.normal(size=3), rng.uniform(-0.5, 0.5))
    return RigidPose(q, 0.03 * rng.normal(size=3)).as_4x4()


@pytest.mark.criterion(6)
def test_criterion_6_gem_suite(report):
    fs = synthetic_frames()
    N = len(fs)
    model = pca_fit(fs, N - 1)
    full_err = reconstruction_errors(model, fs).max()
    per_k = np.stack([reconstruction_errors(truncate(model, k), fs) for k in range(1, N)])
    non_increasing = bool(np.all(np.diff(per_k, axis=0) <= 1e-12))
    round_trip = 0.0
    for f in fs:
        k = fit_coefficients(model, f)
        round_trip = max(round_trip, np.abs(fit_coefficients(model, gem_reconstruct(model, k)) - k).max())
    rng = np.random.default_rng(6)
    J = 3
    w = rng.random(fs[0].shape + (J,))
    rig = SkinningRig(np.stack([random_rigid(rng) for _ in range(J)]), np.stack([random_rigid(rng) for _ in range(J)]),
                      w / w.sum(-1, keepdims=True))
    g = fs[0]
    back = canonicalize(pose(g, rig), rig)
    v = g.valid
    sign = np.sign((back.rotation[v] * g.rotation[v]).sum(-1, keepdims=True))
    skin = max(np.abs(back.position[v] - g.position[v]).max(), np.abs(sign * back.rotation[v] - g.rotation[v]).max())
    ok = full_err < 1e-5 and non_increasing and round_trip < 1e-8 and skin < 1e-6
    report(6, ok, f"K=N-1 error {full_err:.1e}, non-increasing {non_increasing}, "
                  f"fit/reconstruct {round_trip:.1e}, canonicalize/pose {skin:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. editing identities
# ---------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_criterion_7_editing_identities(report):
    a, b, c = synthetic_frames(3)
    checks = {
        "interpolate 0": np.array_equal(interpolate(a, b, 0.0).as_array(), a.as_array()),
        "interpolate 1": np.array_equal(interpolate(a, b, 1.0).as_array(), b.as_array()),
        "empty swap": np.array_equal(region_swap(a, b, np.zeros(a.shape, bool)).as_array(), a.as_array()),
        "empty feathered swap": np.array_equal(region_swap(a, b, np.zeros(a.shape, bool), 4.0).as_array(),
                                               a.as_array()),
        "zero-residual transfer": np.array_equal(expression_transfer(a, c, c).as_array()[a.valid],
                                                 a.as_array()[a.valid]),
    }
    ok = all(checks.values())
    report(7, ok, ", ".join(f"{k} {'ok' if v else 'differs'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 9. compositing conservation and identical-image metrics
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_criterion_9_renderer_conservation(report):
    rng = np.random.default_rng(9)
    cam = Camera(RigidPose(), CameraIntrinsics(60.0, 60.0, 24.0, 20.0, 48, 40))
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(5, 80))
        q = rng.normal(size=(1, n, 4))
        g = GaussianTexture(rng.random((1, n, 3)), rng.uniform(0.01, 0.99, (1, n)),
                            np.c_[rng.uniform(-0.15, 0.15, (n, 2)), rng.uniform(0.3, 1.0, n)].reshape(1, n, 3),
                            rng.uniform(0.002, 0.03, (1, n, 3)), q / np.linalg.norm(q, axis=-1, keepdims=True),
                            np.ones((1, n), bool))
        out = render(g, cam, return_aux=True)
        worst = max(worst, np.abs(out.weight_sum + out.transmittance - 1.0).max())
    img = rng.random((40, 48, 3))
    same = image_metrics(img, img)
    ok = worst <= 1e-6 and same == {"psnr": 99.0, "ssim": 1.0, "l1": 0.0, "l2": 0.0}
    report(9, ok, f"max |weights + transmittance - 1| {worst:.1e}, identical-image metrics {same}")
    assert ok


# ---------------------------------------------------------------------------
# 10. byte-identical reruns
# ---------------------------------------------------------------------------

TINY = {"identities": 1, "expressions": 2, "views": 2, "heldout_views": 1, "image_size": [32, 32],
        "uv_size": 32, "resolution": 12}


def tree_bytes(root: Path) -> dict[str, bytes]:
    # wall-clock timing is the one output allowed to differ
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def pipeline(root: Path) -> dict[str, bytes]:
    sets = [x for k, v in TINY.items() for x in ("--set", f"data.{k}={json.dumps(v)}")]
    assert cli.main(["gen-data", "--set", f"out={root / 'data'}"] + sets) == 0
    assert cli.main(["train", "--set", f"data={root / 'data'}", "--set", f"out={root / 'run'}",
                     "--set", "model.d=16", "--set", "model.heads=2", "--set", "model.p_uv=4",
                     "--set", "model.p_img=8", "--set", "model.k=8", "--set", "train.iterations=6",
                     "--set", "train.warmup=2", "--set", "train.log_every=1", "--set", "train.checkpoint_every=3",
                     "--set", "train.noise_draws=2"]) == 0
    assert cli.main(["infer", "--set", f"data={root / 'data'}", "--set", f"checkpoint={root / 'run/checkpoint.bin'}",
                     "--set", f"out={root / 'infer'}", "--set", "frame=1"]) == 0
    return tree_bytes(root)


@pytest.mark.criterion(10)
def test_criterion_10_determinism(tmp_path, report):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differ and len(a) > 0
    report(10, ok, f"{len(a)} files compared across gen-data, train and infer; differing: {differ or 'none'}")
    assert ok
