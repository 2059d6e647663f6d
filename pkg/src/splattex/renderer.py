"""Forward splat rendering (front-to-back alpha compositing) and image metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera, CameraIntrinsics, RigidPose, quat_to_matrix
from .gaussians import GaussianTexture

T_MIN = 1e-4
PSNR_CAP = 99.0


@dataclass
class RenderSettings:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0
    dilation: float = 0.3  # px^2 added to every 2D covariance
    cutoff_sigma: float = 3.0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not self.near < self.far:
            raise ValueError("near clip must be closer than far clip")


def project_gaussians(position, scale, rotation, pose: RigidPose, K: CameraIntrinsics, dilation: float):
    """Means (n,2), 2D covariances (n,2,2) and camera depths (n,) of 3D splats.

    Sigma2D = J W R diag(s^2) R^T W^T J^T + dilation I, with J the perspective
    Jacobian at the camera-frame mean and W the camera rotation.
    """
    position = np.atleast_2d(position)
    W = pose.matrix
    t = position @ W.T + pose.translation
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    R = quat_to_matrix(np.atleast_2d(rotation))
    M = R * np.atleast_2d(scale)[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    T = J @ W
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2) + dilation * np.eye(2)
    mean = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    return mean, cov2, z


def project_gaussian(position, scale, rotation, pose: RigidPose, K: CameraIntrinsics,
                     settings: RenderSettings | None = None):
    """Single-splat projection; returns None when clipped by near/far."""
    settings = settings or RenderSettings()
    mean, cov, z = project_gaussians(position, scale, rotation, pose, K, settings.dilation)
    if not settings.near < z[0] < settings.far:
        return None
    return mean[0], cov[0], float(z[0])


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    weight_sum: np.ndarray  # (H, W) sum of compositing weights
    transmittance: np.ndarray  # (H, W) residual transmittance


def render(g: GaussianTexture, cam: Camera, settings: RenderSettings | None = None,
           return_aux: bool = False):
    """Front-to-back compositing of all valid texels, sorted by (depth, texel index)."""
    settings = settings or RenderSettings()
    H, Wd = cam.height, cam.width
    color = np.zeros((H, Wd, 3))
    T = np.ones((H, Wd))
    wsum = np.zeros((H, Wd))
    flat = np.flatnonzero(g.valid.ravel())
    if len(flat):
        pos = g.position.reshape(-1, 3)[flat]
        mean, cov, z = project_gaussians(pos, g.scale.reshape(-1, 3)[flat],
                                         g.rotation.reshape(-1, 4)[flat], cam.pose, cam.K,
                                         settings.dilation)
        keep = (z > settings.near) & (z < settings.far)
        order = np.lexsort((flat, z))
        order = order[keep[order]]
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        conic = np.stack([cov[:, 1, 1], -cov[:, 0, 1], cov[:, 0, 0]], axis=1) / det[:, None]
        lam = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1]) + np.sqrt(
            np.maximum(0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2 + cov[:, 0, 1] ** 2, 0.0))
        radius = settings.cutoff_sigma * np.sqrt(lam)
        opac = g.opacity.ravel()[flat]
        cols = g.color.reshape(-1, 3)[flat]
        for i in order:
            mx, my = mean[i]
            r = radius[i]
            x0 = max(int(np.floor(mx - r - 0.5)), 0)
            x1 = min(int(np.ceil(mx + r - 0.5)), Wd - 1)
            y0 = max(int(np.floor(my - r - 0.5)), 0)
            y1 = min(int(np.ceil(my + r - 0.5)), H - 1)
            if x0 > x1 or y0 > y1:
                continue
            dx = (np.arange(x0, x1 + 1) + 0.5 - mx)[None, :]
            dy = (np.arange(y0, y1 + 1) + 0.5 - my)[:, None]
            a, b, c = conic[i]
            alpha = opac[i] * np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
            Tw = T[y0:y1 + 1, x0:x1 + 1]
            alpha = np.where(Tw >= T_MIN, alpha, 0.0)
            w = Tw * alpha
            color[y0:y1 + 1, x0:x1 + 1] += w[..., None] * cols[i]
            wsum[y0:y1 + 1, x0:x1 + 1] += w
            T[y0:y1 + 1, x0:x1 + 1] = Tw * (1.0 - alpha)
    image = color + T[..., None] * settings.background
    if return_aux:
        return RenderOutput(image, wsum, T)
    return image


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    n = len(win)
    H, W = img.shape[:2]
    rows = sum(win[k] * img[k:H - n + 1 + k] for k in range(n))
    return sum(win[k] * rows[:, k:W - n + 1 + k] for k in range(n))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 11:
        raise ValueError("SSIM needs images of at least 11x11 pixels")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window()
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean((num / den).mean(axis=(0, 1))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def image_metrics(a: np.ndarray, b: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return {
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "l1": float(np.mean(np.abs(d))),
        "l2": float(np.mean(d * d)),
    }


def write_metrics_json(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps({k: float(metrics[k]) for k in ("psnr", "ssim", "l1", "l2")}, indent=2))


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    data = img if img.dtype == np.uint8 else to_uint8(img)
    H, W = data.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    data = img if img.dtype == np.uint8 else to_uint8(img)
    H, W = data.shape[:2]
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} file")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit images are supported")
    shape = (H, W, channels) if channels > 1 else (H, W)
    return np.frombuffer(raw, dtype=np.uint8, count=H * W * channels, offset=pos).reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
