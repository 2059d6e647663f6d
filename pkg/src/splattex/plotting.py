"""Report figures written to image files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_loss_curve(rows: list[dict], path) -> None:
    """Total and geometry loss against step, log scale."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    ax.semilogy(steps, [r["geometry"] for r in rows], label="geometry (m²)")
    ax.semilogy(steps, [r["loss"] for r in rows], label="total (weighted)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_bench(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    V = [r["V"] for r in rows]
    ax.plot(V, [r["dense_ms"] for r in rows], "o-", label="dense block")
    ax.plot(V, [r["guided_ms"] for r in rows], "s-", label="registration-guided block")
    ax.set_xlabel("input views V")
    ax.set_ylabel("median time (ms)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_k_sweep(rows: list[dict], path) -> None:
    """Mean reconstruction error of the avatar model against component count."""
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    K = [r["K"] for r in rows]
    ax1.semilogy(K, [max(r["error_std"], 1e-16) for r in rows], "o-", color="C0")
    ax1.set_xlabel("components K")
    ax1.set_ylabel("RMS residual (standardized)", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(K, [r["p2p_mm"] for r in rows], "s--", color="C1")
    ax2.set_ylabel("P2P (mm)", color="C1")
    ax1.grid(alpha=0.3)
    _save(fig, path)


def plot_robustness(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    s = [r["sigma_mm"] for r in rows]
    ax.plot(s, [r["p2s_coarse_mm"] for r in rows], "o-", label="coarse input")
    ax.plot(s, [r["p2s_pred_mm"] for r in rows], "s-", label="prediction")
    ax.set_xlabel("coarse-mesh noise σ (mm)")
    ax.set_ylabel("P2S to ground truth (mm)")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)
