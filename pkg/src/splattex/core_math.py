"""Pinhole cameras, rigid poses, quaternions and Plücker rays.

Conventions: right-handed camera frame looking down +z with y pointing down,
pixel origin at the top-left image corner and pixel *centers* at integer
coordinates + 0.5. Poses are stored world-to-camera. Quaternions are (w, x, y, z).
Everything here is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BEHIND_CAMERA_EPS = 1e-9


class BehindCameraError(ValueError):
    """Raised when a point sits at or behind the camera plane."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for (a batch of) unit quaternions.

    Written with only quadratic terms so that ``q`` and ``-q`` give bit-identical
    matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) from rotation matrices, Shepperd's method."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    r = m.reshape(-1, 3, 3)
    r00, r01, r02 = r[:, 0, 0], r[:, 0, 1], r[:, 0, 2]
    r10, r11, r12 = r[:, 1, 0], r[:, 1, 1], r[:, 1, 2]
    r20, r21, r22 = r[:, 2, 0], r[:, 2, 1], r[:, 2, 2]
    tr = r00 + r11 + r22
    pick = np.argmax(np.stack([tr, r00, r11, r22], axis=1), axis=1)
    # the pivot picked for each matrix keeps the square root well away from zero
    radicand = np.choose(pick, [1.0 + tr, 1.0 + r00 - r11 - r22, 1.0 - r00 + r11 - r22, 1.0 - r00 - r11 + r22])
    s = 2.0 * np.sqrt(np.maximum(radicand, 0.0))
    s = np.where(s > 0.0, s, 1.0)  # only reached for non-rotation input
    cands = np.stack([
        np.stack([0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s], axis=1),
        np.stack([(r21 - r12) / s, 0.25 * s, (r01 + r10) / s, (r02 + r20) / s], axis=1),
        np.stack([(r02 - r20) / s, (r01 + r10) / s, 0.25 * s, (r12 + r21) / s], axis=1),
        np.stack([(r10 - r01) / s, (r02 + r20) / s, (r12 + r21) / s, 0.25 * s], axis=1),
    ])
    out = cands[pick, np.arange(len(pick))]
    out *= np.where(out[:, :1] < 0.0, -1.0, 1.0)
    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(batch + (4,))


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform ``x_cam = R(q) x_world + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"pose quaternion must be unit norm, got |q|={n!r}")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation) -> "RigidPose":
        return cls(matrix_to_quat(rot), translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_4x4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.matrix.T @ self.translation


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose equivalent to applying ``b`` first, then ``a``."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    return RigidPose(q, a.matrix @ b.translation + a.translation)


def invert(a: RigidPose) -> RigidPose:
    rt = a.matrix.T
    return RigidPose(quat_conjugate(a.rotation), -rt @ a.translation)


def apply(a: RigidPose, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ a.matrix.T + a.translation


# ---------------------------------------------------------------------------
# intrinsics / projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    pose: RigidPose
    K: CameraIntrinsics

    @property
    def width(self) -> int:
        return self.K.width

    @property
    def height(self) -> int:
        return self.K.height


def project_points(p: np.ndarray, pose: RigidPose, K: CameraIntrinsics):
    """Vectorised projection; returns ``(pixels (...,2), depth (...))`` with no
    behind-camera check."""
    pc = apply(pose, p)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project_point(p, pose: RigidPose, K: CameraIntrinsics):
    pix, z = project_points(np.asarray(p, dtype=np.float64).reshape(3), pose, K)
    if z <= BEHIND_CAMERA_EPS:
        raise BehindCameraError(f"point is behind the camera (z_cam={float(z)!r})")
    return pix, float(z)


def unproject_pixel(pixel, depth: float, pose: RigidPose, K: CameraIntrinsics) -> np.ndarray:
    """World point at camera-frame depth ``depth`` behind ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    xc = (pixel[..., 0] - K.cx) / K.fx * depth
    yc = (pixel[..., 1] - K.cy) / K.fy * depth
    pc = np.stack([xc, yc, np.broadcast_to(depth, xc.shape)], axis=-1)
    return (pc - pose.translation) @ pose.matrix


@dataclass(frozen=True)
class PluckerRay:
    direction: np.ndarray
    moment: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.direction, self.moment])


def plucker_rays(pixels: np.ndarray, pose: RigidPose, K: CameraIntrinsics) -> np.ndarray:
    """(..., 6) array of ``[direction, center × direction]`` for each pixel."""
    pixels = np.asarray(pixels, dtype=np.float64)
    dc = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    d = dc @ pose.matrix
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    c = pose.center
    m = np.cross(np.broadcast_to(c, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def pixel_to_plucker(pixel, pose: RigidPose, K: CameraIntrinsics) -> PluckerRay:
    v = plucker_rays(np.asarray(pixel, dtype=np.float64).reshape(2), pose, K)
    return PluckerRay(v[:3], v[3:])


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of continuous (x, y) pixel-center coordinates."""
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def plucker_image(cam: Camera) -> np.ndarray:
    return plucker_rays(pixel_centers(cam.height, cam.width), cam.pose, cam.K)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> RigidPose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``;
    image y points against world ``up``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    y = -(up - (up @ z) * z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    rot = np.stack([x, y, z])
    return RigidPose.from_matrix(rot, -rot @ center)


# ---------------------------------------------------------------------------
# camera files
# ---------------------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    K = cam.K
    return {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height,
        "quaternion": [float(v) for v in cam.pose.rotation],
        "translation": [float(v) for v in cam.pose.translation],
    }


def camera_from_dict(d: dict) -> Camera:
    K = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                         int(d["width"]), int(d["height"]))
    return Camera(RigidPose(d["quaternion"], d["translation"]), K)


def save_cameras(path, cameras, **extra) -> None:
    payload = {"cameras": [camera_to_dict(c) for c in cameras]}
    for key, cams in extra.items():
        payload[key] = [camera_to_dict(c) for c in cams]
    Path(path).write_text(json.dumps(payload, indent=2))


def load_cameras(path, key: str = "cameras") -> list[Camera]:
    payload = json.loads(Path(path).read_text())
    return [camera_from_dict(d) for d in payload[key]]
