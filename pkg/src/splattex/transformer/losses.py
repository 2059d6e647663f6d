"""Training losses. Each returns the scalar and, where used for training, the
gradient w.r.t. the texture fields it reads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..renderer import ssim

OPACITY_TARGET = 0.7
SCALE_TARGET = 5e-4


@dataclass
class LossWeights:
    w_geometry: float = 1e-3
    w_reg: float = 1e-3
    w_l1: float = 0.8
    w_ssim: float = 0.2

    def __post_init__(self):
        for name in ("w_geometry", "w_reg", "w_l1", "w_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def geometry_only(cls) -> "LossWeights":
        return cls(w_geometry=1e-3, w_reg=1e-3, w_l1=0.0, w_ssim=0.0)


class NoValidTexelsError(ValueError):
    pass


def loss_geometry(position: np.ndarray, target: np.ndarray, target_valid: np.ndarray):
    """Mean squared distance (m^2) over texels valid in the target."""
    n = int(target_valid.sum())
    if n == 0:
        raise NoValidTexelsError("target has no valid texels")
    diff = np.where(target_valid[..., None], position - np.where(target_valid[..., None], target, 0.0), 0.0)
    loss = float((diff * diff).sum() / n)
    return loss, 2.0 * diff / n


def loss_reg(scale: np.ndarray, opacity: np.ndarray, valid: np.ndarray,
             scale_target: float = SCALE_TARGET, opacity_target: float = OPACITY_TARGET):
    """Mean over texels of ||scale - s_t||^2 + (opacity - o_t)^2."""
    n = int(valid.sum())
    if n == 0:
        raise NoValidTexelsError("texture has no valid texels")
    ds = np.where(valid[..., None], scale - scale_target, 0.0)
    do = np.where(valid, opacity - opacity_target, 0.0)
    loss = float(((ds * ds).sum() + (do * do).sum()) / n)
    return loss, 2.0 * ds / n, 2.0 * do / n


def loss_photometric(rendered: np.ndarray, target: np.ndarray, w_l1: float = 0.8, w_ssim: float = 0.2) -> float:
    """w_l1 * mean|diff| + w_ssim * (1 - SSIM); evaluation only."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("image shapes differ")
    total = w_l1 * float(np.mean(np.abs(rendered - target)))
    if w_ssim:
        total += w_ssim * (1.0 - ssim(rendered, target))
    return total
