"""Timing of one dense attention block against one registration-guided block.

The dense block attends over all UV and image tokens jointly; its attention
is evaluated in query chunks so memory stays bounded at large token counts.
The guided block attends within {UV token} + its k selected image tokens.
Both run forward only in float32.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .transformer.layers import gelu_fwd, layernorm_fwd
from .transformer.model import BLOCK_KEYS, reg_guided_block_fwd


@dataclass
class BenchConfig:
    views: tuple = (2, 4, 8, 12, 16)
    uv_grid: tuple = (64, 64)
    img_grid: tuple = (80, 64)
    k: int = 100
    d: int = 32
    heads: int = 1
    runs: int = 5
    warmup: int = 1
    chunk: int = 256
    seed: int = 0

    def __post_init__(self):
        self.views = tuple(int(v) for v in self.views)
        self.uv_grid = tuple(self.uv_grid)
        self.img_grid = tuple(self.img_grid)
        if self.runs < 5:
            raise ValueError("at least 5 timed runs are required")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("views", "uv_grid", "img_grid"):
            out[key] = list(out[key])
        return out


def random_block_params(d: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    h = 4 * d
    shapes = {key: (d,) for key in BLOCK_KEYS}
    shapes.update({"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
                   "mlp.w1": (d, h), "mlp.b1": (h,), "mlp.w2": (h, d)})
    p = {}
    for key, shape in shapes.items():
        if key.endswith(".g"):
            p[key] = np.ones(shape, dtype)
        elif len(shape) == 2:
            p[key] = (rng.standard_normal(shape) * np.sqrt(2.0 / sum(shape))).astype(dtype)
        else:
            p[key] = np.zeros(shape, dtype)
    return p


def chunked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, chunk: int) -> np.ndarray:
    """softmax(q k^T / sqrt(dh)) v per head, (h, n, dh), one query chunk at a time."""
    h, n, dh = q.shape
    scale = np.float32(1.0 / np.sqrt(dh))
    out = np.empty_like(q)
    kt = np.ascontiguousarray(k.transpose(0, 2, 1))
    for s in range(0, n, chunk):
        sc = (q[:, s:s + chunk] * scale) @ kt
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        denom = sc.sum(axis=-1, keepdims=True)
        out[:, s:s + chunk] = (sc @ v) / denom
    return out


def dense_block(x: np.ndarray, p: dict, heads: int, chunk: int) -> np.ndarray:
    """Pre-norm attention + MLP block over one token set (n, d)."""
    n, d = x.shape
    h1, _ = layernorm_fwd(x, p["ln1.g"], p["ln1.b"])

    def split(t):
        return np.ascontiguousarray(t.reshape(n, heads, d // heads).transpose(1, 0, 2))

    q = split(h1 @ p["attn.wq"] + p["attn.bq"])
    k = split(h1 @ p["attn.wk"] + p["attn.bk"])
    v = split(h1 @ p["attn.wv"] + p["attn.bv"])
    o = chunked_attention(q, k, v, chunk).transpose(1, 0, 2).reshape(n, d)
    x1 = x + o @ p["attn.wo"] + p["attn.bo"]
    h2, _ = layernorm_fwd(x1, p["ln2.g"], p["ln2.b"])
    g, _ = gelu_fwd(h2 @ p["mlp.w1"] + p["mlp.b1"])
    return x1 + g @ p["mlp.w2"] + p["mlp.b2"]


def random_selection(n_uv: int, n_img_total: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct image tokens per UV token."""
    k = min(k, n_img_total)
    keys = rng.random((n_uv, n_img_total), dtype=np.float32) if n_uv * n_img_total <= 5e7 else None
    if keys is not None:
        return np.argpartition(keys, k - 1, axis=1)[:, :k]
    return np.stack([rng.choice(n_img_total, size=k, replace=False) for _ in range(n_uv)])


def _median_ms(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_one(V: int, cfg: BenchConfig) -> dict:
    rng = np.random.default_rng((cfg.seed, V))
    n_uv = cfg.uv_grid[0] * cfg.uv_grid[1]
    n_img = V * cfg.img_grid[0] * cfg.img_grid[1]
    p = random_block_params(cfg.d, rng)
    x_uv = rng.standard_normal((n_uv, cfg.d), dtype=np.float32)
    x_img = rng.standard_normal((n_img, cfg.d), dtype=np.float32)
    flat_idx = random_selection(n_uv, n_img, cfg.k, rng)
    x_all = np.concatenate([x_uv, x_img])
    dense_ms = _median_ms(lambda: dense_block(x_all, p, cfg.heads, cfg.chunk), cfg.runs, cfg.warmup)
    guided_ms = _median_ms(lambda: reg_guided_block_fwd(x_uv, x_img, flat_idx, p, cfg.heads), cfg.runs, cfg.warmup)
    return {"V": V, "dense_ms": dense_ms, "guided_ms": guided_ms, "ratio": dense_ms / guided_ms,
            "tokens": n_uv + n_img}


def run_bench(cfg: BenchConfig, on_row=None) -> list[dict]:
    rows = []
    for V in cfg.views:
        row = bench_one(V, cfg)
        rows.append(row)
        if on_row:
            on_row(row)
    return rows


def growth(rows: list[dict], v0: int, v1: int) -> dict:
    by_v = {r["V"]: r for r in rows}
    return {"dense": by_v[v1]["dense_ms"] / by_v[v0]["dense_ms"],
            "guided": by_v[v1]["guided_ms"] / by_v[v0]["guided_ms"]}
