"""Command-line entry points.

Every command takes ``--config FILE.json`` plus ``--set key=value`` overrides
(dotted keys address nested sections, values are parsed as JSON when
possible) and prints its fully resolved configuration before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

DEFAULTS = {
    "gen-data": {
        "out": "data",
        "data": {},  # DataConfig fields
    },
    "train": {
        "data": "data",
        "out": "run",
        "resume": None,
        "frames": None,  # list of frame indices; default all
        "init_seed": 0,
        "model": {},  # ModelConfig fields
        "train": {},  # TrainConfig fields
    },
    "infer": {
        "checkpoint": "run/checkpoint.bin",
        "data": "data",
        "frame": 0,
        "out": "infer",
        "sigma_noise_mm": None,  # re-noise the coarse mesh instead of using the stored one
        "draw": 1000,
    },
    "eval": {
        "checkpoint": "run/checkpoint.bin",
        "data": "data",
        "frames": None,
        "out": "eval",
        "mode": "model",  # or "gt": score the ground-truth textures themselves
        "sigma_sweep_mm": [],
        "draw": 1000,
        "render": True,
    },
    "avatar": {
        "data": "data",
        "identity": 0,
        "textures": None,  # list of texture files; default: the identity's ground-truth frames
        "K": None,
        "static_mask": None,  # PGM over the uv grid
        "refine_mean": True,
        "out": "avatar",
    },
    "edit": {
        "op": "interpolate",
        "a": None,
        "b": None,
        "c": None,
        "gamma": 0.5,
        "mask": None,
        "feather": 0.0,
        "cameras": None,
        "out": "edit",
    },
    "bench-attention": {
        "out": "bench",
        "bench": {},  # BenchConfig fields
    },
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
        node = nxt
    node[parts[-1]] = parse_value(value)


def deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(command: str, config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        deep_update(cfg, loaded)
    for o in overrides:
        apply_override(cfg, o)
    unknown = set(cfg) - set(DEFAULTS[command])
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    return cfg


def echo_config(command: str, cfg: dict) -> None:
    print(f"# {command} config: {json.dumps(cfg, sort_keys=True)}", flush=True)


def _build(cls, fields: dict, what: str):
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> dict:
    from .dataset import DataConfig, generate_dataset

    dcfg = _build(DataConfig, cfg["data"], "data")
    manifest = generate_dataset(cfg["out"], dcfg)
    print(f"wrote {manifest['n_frames']} frames, {len(manifest['files'])} files to {cfg['out']}")
    return manifest


def _frame_list(ds, frames) -> list[int]:
    if frames is None:
        return list(range(len(ds)))
    bad = [f for f in frames if not 0 <= int(f) < len(ds)]
    if bad:
        from .dataset import DataError
        raise DataError(f"frames {bad} are not in the dataset")
    return [int(f) for f in frames]


def build_samples(ds, frame_ids, mcfg, noise_draws: int = 1, log=print) -> list:
    """Training samples: every frame with its stored coarse mesh plus extra noise draws."""
    from .dataset import renoised_coarse
    from .transformer.train import make_sample

    samples = []
    sigma = ds.config.sigma_noise_mm
    t0 = time.perf_counter()
    for i in frame_ids:
        fr = ds.load(i)
        for d in range(noise_draws):
            coarse = fr.coarse_mesh if d == 0 else renoised_coarse(fr, sigma, ds.config.seed, d)
            samples.append(make_sample(coarse, fr.images, ds.cameras, fr.gt, mcfg, i, d))
    log(f"prepared {len(samples)} samples in {time.perf_counter() - t0:.1f}s")
    return samples


def cmd_train(cfg: dict) -> dict:
    from .dataset import Dataset
    from .plotting import plot_loss_curve
    from .transformer.checkpoint import load_checkpoint, save_checkpoint
    from .transformer.model import ModelConfig, init_params
    from .transformer.train import TrainConfig, evaluate_geometry_loss, new_state, train

    ds = Dataset(cfg["data"])
    if cfg["resume"]:
        mcfg, tcfg, state = load_checkpoint(cfg["resume"])
        if cfg["train"]:
            tcfg = _build(TrainConfig, {**tcfg.to_dict(), **cfg["train"]}, "train")
    else:
        mcfg = _build(ModelConfig, {"views": len(ds.cameras), "img_size": list(ds.config.image_size),
                                    "uv_size": ds.config.uv_size, **cfg["model"]}, "model")
        tcfg = _build(TrainConfig, cfg["train"], "train")
        state = new_state(mcfg, tcfg, init_params(mcfg, cfg["init_seed"]))
    if mcfg.views != len(ds.cameras):
        from .dataset import DataError
        raise DataError(f"model expects {mcfg.views} views, dataset has {len(ds.cameras)}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    frame_ids = _frame_list(ds, cfg["frames"])
    samples = build_samples(ds, frame_ids, mcfg, tcfg.noise_draws)
    stored = samples[::tcfg.noise_draws]
    geo0 = evaluate_geometry_loss(state.params, mcfg, stored)
    log_rows = []
    ckpt_path = out / "checkpoint.bin"

    def on_log(row):
        # wall-clock time stays out of loss.csv so reruns are byte-identical
        log_rows.append({k: v for k, v in vars(row).items() if k != "seconds"})
        if row.step % max(tcfg.log_every * 20, 1) == 0:
            print(f"step {row.step:6d} lr {row.lr:.2e} loss {row.loss:.4e} geometry {row.geometry:.4e} "
                  f"reg {row.reg:.4e} ({row.seconds:.0f}s)", flush=True)

    def on_checkpoint(st):
        save_checkpoint(out / f"checkpoint_{st.step:06d}.bin", st, mcfg, tcfg)

    t0 = time.perf_counter()
    train(state, mcfg, tcfg, samples, on_log=on_log, on_checkpoint=on_checkpoint)
    seconds = time.perf_counter() - t0
    save_checkpoint(ckpt_path, state, mcfg, tcfg)
    geo1 = evaluate_geometry_loss(state.params, mcfg, stored)
    write_csv(out / "loss.csv", log_rows)
    if log_rows:
        plot_loss_curve(log_rows, out / "loss.png")
    write_json(out / "timing.json", {"train_seconds": seconds})
    summary = {"steps": state.step, "geometry_loss_initial": geo0,
               "geometry_loss_final": geo1, "geometry_loss_fall": geo0 / geo1 if geo1 > 0 else float("inf"),
               "frames": frame_ids, "checkpoint": ckpt_path.name}
    write_json(out / "train_summary.json", summary)
    print(f"geometry loss {geo0:.4e} -> {geo1:.4e} ({summary['geometry_loss_fall']:.1f}x) in {seconds:.0f}s")
    return summary


def _inputs_for(ds, frame, mcfg, sigma_mm, draw):
    from .dataset import renoised_coarse
    from .transformer.train import prepare_inputs

    coarse = frame.coarse_mesh if sigma_mm is None else renoised_coarse(frame, sigma_mm, ds.config.seed, draw)
    return coarse, prepare_inputs(coarse, frame.images, ds.cameras, mcfg)


def cmd_infer(cfg: dict) -> dict:
    from .dataset import Dataset
    from .gaussians import save_gaussians, write_ply
    from .transformer.checkpoint import load_checkpoint
    from .transformer.train import infer

    mcfg, _, state = load_checkpoint(cfg["checkpoint"])
    ds = Dataset(cfg["data"])
    (frame_id,) = _frame_list(ds, [cfg["frame"]])
    fr = ds.load(frame_id)
    _, inputs = _inputs_for(ds, fr, mcfg, cfg["sigma_noise_mm"], cfg["draw"])
    g = infer(state.params, mcfg, inputs)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(out / "gaussians.bin", g)
    n = write_ply(out / "gaussians.ply", g)
    print(f"wrote {n} splats to {out / 'gaussians.ply'}")
    return {"splats": n, "valid_texels": g.n_valid}


METRIC_KEYS = ("psnr", "ssim", "l1", "l2")


def evaluate_frame(g, fr, ds, coarse, render: bool = True, pred_mesh=None) -> dict:
    """Image metrics at held-out cameras plus mesh metrics of the predicted
    geometry (extracted from ``g`` unless given) and of the coarse input
    against ground truth."""
    from .mesh import extract_mesh_from_texture, mesh_metrics
    from .renderer import image_metrics, render as render_splats

    rec = {"frame": fr.index}
    if render and ds.heldout_cameras:
        ms = []
        for cam in ds.heldout_cameras:
            target = render_splats(fr.gt, cam)
            ms.append(image_metrics(render_splats(g, cam), target))
        for k in METRIC_KEYS:
            rec[k] = float(np.mean([m[k] for m in ms]))
    if pred_mesh is None:
        pred_mesh = extract_mesh_from_texture(g.position, g.valid, fr.gt_mesh)
    rec["p2p_mm"], rec["p2s_mm"] = mesh_metrics(pred_mesh, fr.gt_mesh)
    rec["coarse_p2p_mm"], rec["coarse_p2s_mm"] = mesh_metrics(coarse, fr.gt_mesh)
    return rec


def _mean_record(rows: list[dict]) -> dict:
    keys = [k for k in rows[0] if k != "frame"]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def cmd_eval(cfg: dict) -> dict:
    from .dataset import Dataset
    from .mesh import extract_mesh_from_texture, p2p_mm
    from .plotting import plot_robustness
    from .transformer.checkpoint import load_checkpoint
    from .transformer.train import infer

    ds = Dataset(cfg["data"])
    frame_ids = _frame_list(ds, cfg["frames"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["mode"] not in ("model", "gt"):
        raise ConfigError("mode must be 'model' or 'gt'")
    result = {"mode": cfg["mode"], "frames": frame_ids}
    if cfg["mode"] == "gt":
        # the ground-truth geometry is known exactly; the texture-to-mesh
        # extraction residual is reported separately
        rows = []
        for fr in (ds.load(i) for i in frame_ids):
            rec = evaluate_frame(fr.gt, fr, ds, fr.coarse_mesh, cfg["render"], pred_mesh=fr.gt_mesh)
            extracted = extract_mesh_from_texture(fr.gt.position, fr.gt.valid, fr.gt_mesh)
            rec["extraction_p2p_mm"] = p2p_mm(extracted, fr.gt_mesh)
            rows.append(rec)
        result["per_frame"] = rows
        result["mean"] = _mean_record(rows)
    else:
        mcfg, _, state = load_checkpoint(cfg["checkpoint"])
        rows = []
        for i in frame_ids:
            fr = ds.load(i)
            coarse, inputs = _inputs_for(ds, fr, mcfg, None, 0)
            rows.append(evaluate_frame(infer(state.params, mcfg, inputs), fr, ds, coarse, cfg["render"]))
        result["per_frame"] = rows
        result["mean"] = _mean_record(rows)
        sweep = []
        for sigma in cfg["sigma_sweep_mm"]:
            srows = []
            for i in frame_ids:
                fr = ds.load(i)
                coarse, inputs = _inputs_for(ds, fr, mcfg, float(sigma), cfg["draw"])
                srows.append(evaluate_frame(infer(state.params, mcfg, inputs), fr, ds, coarse, False))
            m = _mean_record(srows)
            sweep.append({"sigma_mm": float(sigma), "p2s_pred_mm": m["p2s_mm"], "p2s_coarse_mm": m["coarse_p2s_mm"],
                          "p2p_pred_mm": m["p2p_mm"], "p2p_coarse_mm": m["coarse_p2p_mm"]})
            print(f"sigma {sigma} mm: P2S pred {m['p2s_mm']:.3f} coarse {m['coarse_p2s_mm']:.3f}", flush=True)
        if sweep:
            result["sigma_sweep"] = sweep
            write_csv(out / "robustness.csv", sweep)
            plot_robustness(sweep, out / "robustness.png")
    write_json(out / "metrics.json", result)
    print(json.dumps(result["mean"], sort_keys=True))
    return result


def cmd_avatar(cfg: dict) -> dict:
    from . import avatar as av
    from .dataset import Dataset, DataError
    from .gaussians import load_gaussians
    from .mesh import extract_mesh_from_texture, p2p_mm
    from .plotting import plot_k_sweep
    from .renderer import image_metrics, read_pgm, render as render_splats
    from .synthdata import jaw_rig

    ds = Dataset(cfg["data"])
    E = ds.config.expressions
    ids = [cfg["identity"] * E + j for j in range(E)]
    frames = [ds.load(i) for i in ids if i < len(ds)]
    if cfg["textures"]:
        textures = [load_gaussians(p) for p in cfg["textures"]]
        if len(textures) != len(frames):
            raise DataError("need one texture per frame of the identity")
    else:
        textures = [fr.gt for fr in frames]
    if len(textures) < 2:
        raise DataError("at least two frames are required")
    H = textures[0].shape[0]
    texel_uv = np.stack(np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(H) + 0.5) / H, indexing="xy"), -1)
    rigs = [jaw_rig(texel_uv, fr.spec["expression"]["jaw_angle"]) for fr in frames]
    canon = [av.canonicalize(g, r) for g, r in zip(textures, rigs)]
    N = len(canon)
    K = N - 1 if cfg["K"] is None else int(cfg["K"])
    static = None
    if cfg["static_mask"]:
        static = read_pgm(cfg["static_mask"]) > 0.5
    model = av.pca_fit(canon, K, static)
    full = model
    if cfg["refine_mean"]:
        model = av.refine_mean(model, canon)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    av.save_model(out / "gem.bin", model)
    coeffs = [av.fit_coefficients(model, g) for g in canon]
    write_csv(out / "coefficients.csv",
              [{"frame": i, **{f"k{j}": float(c[j]) for j in range(K)}} for i, c in zip(ids, coeffs)])
    sweep = []
    cam = ds.heldout_cameras[0] if ds.heldout_cameras else ds.cameras[0]
    for k in range(1, K + 1):
        mk = av.truncate(full, k)
        err = av.reconstruction_errors(mk, canon)
        p2p, psnr = [], []
        for g, r, fr in zip(canon, rigs, frames):
            rec = av.pose(av.gem_reconstruct(mk, av.fit_coefficients(mk, g)), r)
            m = extract_mesh_from_texture(rec.position, rec.valid, fr.gt_mesh)
            p2p.append(p2p_mm(m, extract_mesh_from_texture(av.pose(g, r).position, g.valid, fr.gt_mesh)))
            if k in (1, K):
                psnr.append(image_metrics(render_splats(rec, cam), render_splats(av.pose(g, r), cam))["psnr"])
        row = {"K": k, "error_std": float(err.mean()), "error_std_max": float(err.max()), "p2p_mm": float(np.mean(p2p))}
        if psnr:
            row["psnr"] = float(np.mean(psnr))
        sweep.append(row)
    write_csv(out / "k_sweep.csv", [{k: r.get(k, "") for k in ("K", "error_std", "error_std_max", "p2p_mm", "psnr")}
                                    for r in sweep])
    plot_k_sweep(sweep, out / "k_sweep.png")
    report = {"frames": ids, "K": K, "D": model.D, "k_sweep": sweep,
              "explained_variance": full.explained_variance.tolist()}
    write_json(out / "avatar_report.json", report)
    print(f"fitted K={K} on {N} frames; full-rank residual {sweep[-1]['error_std']:.3e}")
    return report


def _load_cameras_arg(path):
    from .core_math import load_cameras
    if path is None:
        return []
    return load_cameras(path)


def cmd_edit(cfg: dict) -> dict:
    from . import avatar as av
    from .gaussians import load_gaussians, save_gaussians
    from .renderer import read_pgm, render as render_splats, write_ppm

    op = cfg["op"]
    need = {"interpolate": ("a", "b"), "swap": ("a", "b"), "transfer": ("a", "b", "c")}
    if op not in need:
        raise ConfigError("op must be interpolate, swap or transfer")
    missing = [k for k in need[op] if not cfg[k]]
    if missing:
        raise ConfigError(f"{op} needs textures {missing}")
    tex = {k: load_gaussians(cfg[k]) for k in need[op]}
    if op == "interpolate":
        g = av.interpolate(tex["a"], tex["b"], float(cfg["gamma"]))
    elif op == "swap":
        H, W = tex["a"].shape
        mask = np.zeros((H, W), dtype=bool) if cfg["mask"] is None else read_pgm(cfg["mask"]) > 0.5
        g = av.region_swap(tex["a"], tex["b"], mask, float(cfg["feather"]))
    else:
        # a: source neutral, b: target neutral, c: target expression
        g = av.expression_transfer(tex["a"], tex["b"], tex["c"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(out / "edited.bin", g)
    cams = _load_cameras_arg(cfg["cameras"])
    for i, cam in enumerate(cams):
        write_ppm(out / f"preview_{i:02d}.ppm", render_splats(g, cam))
    print(f"{op}: wrote {out / 'edited.bin'} and {len(cams)} previews")
    return {"op": op, "previews": len(cams)}


def cmd_bench_attention(cfg: dict) -> dict:
    from .bench import BenchConfig, growth, run_bench
    from .plotting import plot_bench

    bcfg = _build(BenchConfig, cfg["bench"], "bench")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    def on_row(r):
        print(f"V={r['V']:2d} tokens={r['tokens']:6d} dense {r['dense_ms']:10.1f} ms  guided {r['guided_ms']:8.1f} ms"
              f"  ratio {r['ratio']:.2f}", flush=True)

    rows = run_bench(bcfg, on_row)
    write_csv(out / "bench.csv", [{k: r[k] for k in ("V", "dense_ms", "guided_ms", "ratio")} for r in rows])
    plot_bench(rows, out / "bench.png")
    summary = {"rows": rows}
    vs = [r["V"] for r in rows]
    if 4 in vs and 16 in vs:
        summary["growth_4_to_16"] = growth(rows, 4, 16)
        print(f"growth V=4->16: dense {summary['growth_4_to_16']['dense']:.2f}x, "
              f"guided {summary['growth_4_to_16']['guided']:.2f}x")
    write_json(out / "bench.json", summary)
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "avatar": cmd_avatar,
    "edit": cmd_edit,
    "bench-attention": cmd_bench_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splattex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    return parser


def run(command: str, cfg: dict) -> dict:
    echo_config(command, cfg)
    return COMMANDS[command](cfg)


def main(argv: list[str] | None = None) -> int:
    from .avatar import DegenerateTransformError, LayoutMismatchError
    from .dataset import DataError
    from .transformer.checkpoint import CheckpointError
    from .transformer.train import NonFiniteError

    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config, args.set)
        run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, LayoutMismatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, DegenerateTransformError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
