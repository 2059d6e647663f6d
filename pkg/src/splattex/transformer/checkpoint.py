"""Binary checkpoints: a text header followed by float32 blocks.

Header lines: magic, version, one JSON line (model config, training config,
step, Adam step count, parameter names and shapes), ``end``. The body holds
every parameter in declaration order, then the Adam first and second
moments in the same order, all little-endian float32.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes
from .train import TrainConfig, TrainState, make_optimizer

MAGIC = "SPLATTEX-CHECKPOINT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: TrainState, cfg: ModelConfig, tcfg: TrainConfig) -> None:
    names = list(state.params)
    header = {
        "model": cfg.to_dict(),
        "train": tcfg.to_dict(),
        "step": state.step,
        "adam_t": state.opt.t,
        "params": [[n, list(state.params[n].shape)] for n in names],
    }
    with open(path, "wb") as f:
        f.write(f"{MAGIC}\nversion {VERSION}\n{json.dumps(header, sort_keys=True)}\nend\n".encode())
        for group in (state.params, state.opt.m, state.opt.v):
            for n in names:
                f.write(np.ascontiguousarray(group[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """(ModelConfig, TrainConfig, TrainState) from a checkpoint file."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 4)
    if len(parts) < 5 or parts[0].decode(errors="replace") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if parts[1].decode() != f"version {VERSION}" or parts[3] != b"end":
        raise CheckpointError(f"unsupported checkpoint header in {path}")
    header = json.loads(parts[2])
    body = parts[4]
    cfg = ModelConfig(**header["model"])
    tcfg = TrainConfig(**header["train"])
    expected = param_shapes(cfg)
    names = [n for n, _ in header["params"]]
    if names != list(expected) or any(tuple(s) != expected[n] for n, s in header["params"]):
        raise CheckpointError("parameter layout does not match the model configuration")
    total = sum(int(np.prod(s)) for s in expected.values())
    if len(body) != 3 * 4 * total:
        raise CheckpointError("checkpoint body has the wrong size")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    groups = []
    off = 0
    for _ in range(3):
        g = {}
        for n in names:
            size = int(np.prod(expected[n]))
            g[n] = flat[off:off + size].reshape(expected[n]).copy()
            off += size
        groups.append(g)
    params, m, v = groups
    opt = make_optimizer(cfg, tcfg, params)
    opt.m, opt.v, opt.t = m, v, header["adam_t"]
    return cfg, tcfg, TrainState(params, opt, header["step"], [])
