"""UV-space textures of Gaussian splats and their file formats."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .mesh import read_texture, write_texture

CHANNELS = 14
COLOR = slice(0, 3)
OPACITY = slice(3, 4)
POSITION = slice(4, 7)
SCALE = slice(7, 10)
ROTATION = slice(10, 14)

# channel-class name -> slice, in storage order
ATTRIBUTES = {
    "color": COLOR,
    "opacity": OPACITY,
    "position": POSITION,
    "scale": SCALE,
    "rotation": ROTATION,
}

SH_C0 = 0.28209479177387814


@dataclass
class GaussianTexture:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W) in (0, 1)
    position: np.ndarray  # (H, W, 3) metres
    scale: np.ndarray  # (H, W, 3) > 0, metres
    rotation: np.ndarray  # (H, W, 4) unit (w, x, y, z)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [self.color, self.opacity[..., None], self.position, self.scale, self.rotation], axis=-1
        )

    @classmethod
    def from_array(cls, arr: np.ndarray, valid: np.ndarray | None = None) -> "GaussianTexture":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[-1] != CHANNELS:
            raise ValueError(f"expected {CHANNELS} channels, got {arr.shape[-1]}")
        if valid is None:
            valid = np.ones(arr.shape[:2], dtype=bool)
        return cls(
            arr[..., COLOR].copy(), arr[..., 3].copy(), arr[..., POSITION].copy(),
            arr[..., SCALE].copy(), arr[..., ROTATION].copy(), np.asarray(valid, dtype=bool).copy(),
        )

    def copy(self) -> "GaussianTexture":
        return GaussianTexture.from_array(self.as_array(), self.valid)

    def with_valid(self, valid: np.ndarray) -> "GaussianTexture":
        return replace(self, valid=np.asarray(valid, dtype=bool))

    def check(self, atol: float = 1e-6) -> None:
        """Raise if any valid texel violates the attribute ranges."""
        v = self.valid
        problems = []
        if np.any(self.color[v] < 0) or np.any(self.color[v] > 1):
            problems.append("color outside [0, 1]")
        if np.any(self.opacity[v] <= 0) or np.any(self.opacity[v] >= 1):
            problems.append("opacity outside (0, 1)")
        if np.any(self.scale[v] <= 0):
            problems.append("non-positive scale")
        if np.any(np.abs(np.linalg.norm(self.rotation[v], axis=-1) - 1.0) > atol):
            problems.append("rotation not unit norm")
        if not np.all(np.isfinite(self.as_array()[v])):
            problems.append("non-finite values")
        if problems:
            raise ValueError("invalid Gaussian texture: " + ", ".join(problems))


def empty_texture(height: int, width: int) -> GaussianTexture:
    arr = np.zeros((height, width, CHANNELS))
    arr[..., 10] = 1.0
    arr[..., SCALE] = 1e-3
    arr[..., 3] = 0.5
    return GaussianTexture.from_array(arr, np.zeros((height, width), dtype=bool))


def save_gaussians(path, g: GaussianTexture) -> None:
    write_texture(path, g.as_array(), g.valid)


def load_gaussians(path) -> GaussianTexture:
    tex = read_texture(path)
    return GaussianTexture.from_array(tex.values, tex.valid)


PLY_FIELDS = (
    ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def ply_records(g: GaussianTexture) -> np.ndarray:
    """Valid texels in raster order using the common 3DGS activations
    (SH DC colour, opacity logit, log scale)."""
    v = g.valid
    op = np.clip(g.opacity[v], 1e-7, 1 - 1e-7)
    cols = [
        g.position[v],
        (g.color[v] - 0.5) / SH_C0,
        np.log(op / (1 - op))[:, None],
        np.log(g.scale[v]),
        g.rotation[v],
    ]
    data = np.concatenate(cols, axis=1).astype("<f4")
    rec = np.empty(len(data), dtype=[(name, "<f4") for name in PLY_FIELDS])
    for i, name in enumerate(PLY_FIELDS):
        rec[name] = data[:, i]
    return rec


def write_ply(path, g: GaussianTexture) -> int:
    rec = ply_records(g)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + rec.tobytes())
    return len(rec)
