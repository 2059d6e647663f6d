"""Procedural heads: identities, expressions, rig, cameras and ground-truth frames.

A head is a UV-sphere (radius 0.1 m) scaled per axis, with a value-noise
albedo, eight Gaussian bumps on the front hemisphere as expression
blendshapes and a jaw hinge driven by linear blend skinning. The front of
the head faces -z; cameras sit on an arc around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .avatar import SkinningRig, blend_transforms, apply_blended
from .core_math import Camera, CameraIntrinsics, axis_angle_to_quat, look_at, quat_to_matrix, matrix_to_quat
from .gaussians import GaussianTexture
from .mesh import TopologyMesh, bake_position_texture, vertex_normals
from .prng import Xoshiro256
from .renderer import RenderSettings, render

BASE_RADIUS = 0.1
N_BUMPS = 8
BUMP_SIGMA = 0.03
MAX_BUMP = 0.05
MAX_JAW = 0.5
GT_OPACITY = 0.95
JAW_HINGE = np.array([0.0, -0.01, 0.02])
# (u, v) anchors of the expression bumps; u = 0.5 is the front meridian
BUMP_UVS = np.array([
    [0.5, 0.375], [0.375, 0.375], [0.625, 0.375], [0.5, 0.5],
    [0.375, 0.625], [0.625, 0.625], [0.5, 0.75], [0.5, 0.25],
])


@dataclass
class IdentitySpec:
    seed: int
    axis_scales: np.ndarray = None
    texture_seed: int = None
    resolution: int = 32

    def __post_init__(self):
        rng = Xoshiro256(self.seed, 0x1D)
        if self.axis_scales is None:
            self.axis_scales = rng.uniform(0.8, 1.2, size=3)
        self.axis_scales = np.asarray(self.axis_scales, dtype=np.float64)
        if np.any(self.axis_scales < 0.8) or np.any(self.axis_scales > 1.2):
            raise ValueError("axis scales must lie in [0.8, 1.2]")
        if self.texture_seed is None:
            self.texture_seed = rng.next_u64() & 0x7FFFFFFF

    def to_dict(self) -> dict:
        return {"seed": self.seed, "axis_scales": self.axis_scales.tolist(),
                "texture_seed": self.texture_seed, "resolution": self.resolution}


@dataclass
class ExpressionSpec:
    e: np.ndarray = field(default_factory=lambda: np.zeros(N_BUMPS))
    jaw_angle: float = 0.0

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64).reshape(N_BUMPS)
        if np.any(np.abs(self.e) > MAX_BUMP) or abs(self.jaw_angle) > MAX_JAW:
            raise ValueError("expression outside the allowed range")

    @classmethod
    def random(cls, seed: int, index: int, amplitude: float = 0.01, jaw_max: float = 0.25) -> "ExpressionSpec":
        rng = Xoshiro256(seed, 0xE7, index)
        e = rng.uniform(-amplitude, amplitude, size=N_BUMPS)
        return cls(e, float(rng.uniform(0.0, jaw_max)))

    def to_dict(self) -> dict:
        return {"e": self.e.tolist(), "jaw_angle": self.jaw_angle}


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def sphere_grid(res: int):
    """Vertex uvs and faces of a (res+1) x (res+1) lat-long grid.

    Row i is latitude (v = i/res, top pole at v = 0), column j longitude
    (u = j/res, seam at the back). Pole rows and the seam column are
    duplicated vertices so every vertex has a single uv.
    """
    i, j = np.meshgrid(np.arange(res + 1), np.arange(res + 1), indexing="ij")
    uvs = np.stack([j / res, i / res], axis=-1).reshape(-1, 2)
    idx = (i * (res + 1) + j)[:-1, :-1].ravel()
    a, b, c, d = idx, idx + 1, idx + res + 1, idx + res + 2
    faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    return uvs, faces


def uv_to_unit_sphere(uv: np.ndarray) -> np.ndarray:
    theta = np.pi * uv[..., 1]
    phi = 2.0 * np.pi * uv[..., 0] - np.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), -s * np.cos(phi)], axis=-1)


def neutral_surface(uv: np.ndarray, axis_scales) -> np.ndarray:
    return BASE_RADIUS * uv_to_unit_sphere(uv) * np.asarray(axis_scales)


def ellipsoid_normals(points: np.ndarray, axis_scales) -> np.ndarray:
    r = BASE_RADIUS * np.asarray(axis_scales)
    n = points / r**2
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def vertex_count(res: int) -> int:
    return (res + 1) ** 2


def _value_noise(rng: Xoshiro256, uv: np.ndarray, octaves: int = 4, base: int = 4) -> np.ndarray:
    """Sum of smoothstep-interpolated lattice noise, periodic in u."""
    out = np.zeros(uv.shape[:-1])
    amp, total = 1.0, 0.0
    for o in range(octaves):
        n = base * 2**o
        lattice = rng.uniform(0.0, 1.0, size=(n + 1, n))
        x = uv[..., 0] * n
        y = uv[..., 1] * n
        x0 = np.floor(x).astype(np.int64)
        y0 = np.minimum(np.floor(y).astype(np.int64), n - 1)
        fx, fy = x - x0, y - y0
        fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
        x0 %= n
        x1 = (x0 + 1) % n
        top = lattice[y0, x0] * (1 - fx) + lattice[y0, x1] * fx
        bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x1] * fx
        out += amp * (top * (1 - fy) + bot * fy)
        total += amp
        amp *= 0.5
    return out / total


class ProceduralColor:
    """Multi-octave value-noise albedo over uv, mapped into [0.1, 0.9]."""

    def __init__(self, texture_seed: int):
        self.texture_seed = texture_seed

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        rng = Xoshiro256(self.texture_seed, 0xC0)
        chans = [_value_noise(rng, uv) for _ in range(3)]
        c = np.stack(chans, axis=-1)
        lo, hi = 0.25, 0.75  # typical noise range, stretched then clipped
        return np.clip(0.1 + 0.8 * (c - lo) / (hi - lo), 0.1, 0.9)


def _smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def jaw_weight(uv: np.ndarray) -> np.ndarray:
    """Skinning weight of the jaw joint: the lower front of the head.

    Computed from the sphere direction rather than raw uv so duplicated
    seam and pole vertices receive identical weights.
    """
    d = uv_to_unit_sphere(uv)
    return _smoothstep(0.3, 0.6, -d[..., 2]) * _smoothstep(0.1, 0.4, -d[..., 1])


def make_rig_weights(uv: np.ndarray) -> np.ndarray:
    w1 = jaw_weight(uv)
    return np.stack([1.0 - w1, w1], axis=-1)


def jaw_rig(uv: np.ndarray, jaw_angle: float) -> SkinningRig:
    """Two joints (head, jaw); the jaw rotates about the x axis through JAW_HINGE."""
    rest = np.tile(np.eye(4), (2, 1, 1))
    rest[1, :3, 3] = JAW_HINGE
    posed = rest.copy()
    posed[1, :3, :3] = quat_to_matrix(axis_angle_to_quat([1.0, 0.0, 0.0], jaw_angle))
    return SkinningRig(rest, posed, make_rig_weights(uv))


@dataclass
class Identity:
    spec: IdentitySpec
    mesh: TopologyMesh
    color: ProceduralColor


def gen_identity(spec: IdentitySpec) -> Identity:
    uvs, faces = sphere_grid(spec.resolution)
    verts = neutral_surface(uvs, spec.axis_scales)
    return Identity(spec, TopologyMesh(verts, faces, uvs), ProceduralColor(spec.texture_seed))


def bump_field(points: np.ndarray, centers: np.ndarray, e: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    return (np.exp(-d2 / BUMP_SIGMA**2) * e).sum(axis=1)


def apply_expression(identity: Identity, expr: ExpressionSpec) -> TopologyMesh:
    """Bumps along the ellipsoid normals, then forward LBS of the jaw."""
    mesh = identity.mesh
    scales = identity.spec.axis_scales
    if not np.any(expr.e) and expr.jaw_angle == 0.0:
        return mesh.with_vertices(mesh.vertices)
    centers = neutral_surface(BUMP_UVS, scales)
    disp = bump_field(mesh.vertices, centers, expr.e)
    verts = mesh.vertices + ellipsoid_normals(mesh.vertices, scales) * disp[:, None]
    if expr.jaw_angle != 0.0:
        rig = jaw_rig(mesh.uvs, expr.jaw_angle)
        verts = apply_blended(blend_transforms(rig), verts)
    return mesh.with_vertices(verts)


def gen_cameras(V: int, radius: float = 0.6, elevation: float = 0.0, image_size=(64, 64),
                fov_deg: float = 26.0, span_deg: float = 40.0) -> list[Camera]:
    """V cameras evenly spread over [-span, +span] azimuth, aimed at the origin."""
    if V < 1:
        raise ValueError("need at least one camera")
    H, W = image_size
    f = 0.5 * W / np.tan(np.radians(fov_deg) / 2.0)
    K = CameraIntrinsics(f, f, W / 2.0, H / 2.0, W, H)
    az = np.zeros(1) if V == 1 else np.radians(np.linspace(-span_deg, span_deg, V))
    el = np.radians(elevation)
    cams = []
    for a in az:
        center = radius * np.array([np.sin(a) * np.cos(el), np.sin(el), -np.cos(a) * np.cos(el)])
        cams.append(Camera(look_at(center), K))
    return cams


# ---------------------------------------------------------------------------
# ground-truth frames
# ---------------------------------------------------------------------------

def _texel_uvs(H: int, W: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def gt_gaussians(mesh: TopologyMesh, color: ProceduralColor, H_uv: int) -> GaussianTexture:
    """Splat texture of a mesh: baked positions, procedural colours, scales from
    the texel footprint and rotations from the uv tangent frame."""
    pos = bake_position_texture(mesh, H_uv, H_uv)
    valid = pos.valid
    p = np.where(valid[..., None], pos.values, 0.0)
    du = np.gradient(p, axis=1)
    dv = np.gradient(p, axis=0)
    su = np.linalg.norm(du, axis=-1)
    sv = np.linalg.norm(dv, axis=-1)
    floor = 1e-5
    t1 = du / np.maximum(su, 1e-12)[..., None]
    n = np.cross(du, dv)
    nn = np.linalg.norm(n, axis=-1)
    # fall back to the radial direction where the frame degenerates (poles)
    radial = p / np.maximum(np.linalg.norm(p, axis=-1), 1e-12)[..., None]
    n = np.where((nn > 1e-12)[..., None], n / np.maximum(nn, 1e-12)[..., None], radial)
    t1 = t1 - (t1 * n).sum(-1, keepdims=True) * n
    t1n = np.linalg.norm(t1, axis=-1)
    alt = np.cross(n, np.array([0.0, 0.0, 1.0]))
    alt = np.where((np.linalg.norm(alt, axis=-1) < 1e-6)[..., None], np.cross(n, [1.0, 0.0, 0.0]), alt)
    alt /= np.linalg.norm(alt, axis=-1, keepdims=True)
    t1 = np.where((t1n > 1e-9)[..., None], t1 / np.maximum(t1n, 1e-12)[..., None], alt)
    t2 = np.cross(n, t1)
    R = np.stack([t1, t2, n], axis=-1)  # columns: tangent, bitangent, normal
    rot = matrix_to_quat(R.reshape(-1, 3, 3)).reshape(H_uv, H_uv, 4)
    scale = np.stack([np.maximum(su, floor), np.maximum(sv, floor),
                      np.maximum(0.1 * np.minimum(su, sv), floor)], axis=-1)
    col = color(_texel_uvs(H_uv, H_uv))
    opacity = np.full((H_uv, H_uv), GT_OPACITY)
    return GaussianTexture(col, opacity, p, scale, rot, valid.copy())


def weld_groups(vertices: np.ndarray, decimals: int = 12) -> np.ndarray:
    """Index of the first vertex with an identical (rounded) position."""
    _, first, inverse = np.unique(np.round(vertices, decimals), axis=0, return_index=True, return_inverse=True)
    return first[inverse.ravel()]


def perturb_mesh(mesh: TopologyMesh, sigma: float, seed: int, frame: int, weld: np.ndarray | None = None,
                 draw: int = 0) -> TopologyMesh:
    """Add i.i.d. N(0, sigma^2) noise per vertex coordinate. Coincident
    vertices (poles, seam) share one sample so the mesh stays closed.
    ``draw`` selects an independent noise realization for the same frame."""
    if sigma == 0.0:
        return mesh.with_vertices(mesh.vertices)
    if weld is None:
        weld = weld_groups(mesh.vertices)
    noise = Xoshiro256(seed, 0x0153, frame, draw).normal((len(mesh.vertices), 3), std=sigma)
    return mesh.with_vertices(mesh.vertices + noise[weld])


@dataclass
class Frame:
    gt: GaussianTexture
    gt_mesh: TopologyMesh
    coarse_mesh: TopologyMesh
    images: list


def bake_gt_frame(identity: Identity, expr: ExpressionSpec, cameras, H_uv: int = 64,
                  sigma_noise: float = 3e-3, seed: int = 0, frame: int = 0,
                  settings: RenderSettings | None = None, weld: np.ndarray | None = None) -> Frame:
    mesh = apply_expression(identity, expr)
    gt = gt_gaussians(mesh, identity.color, H_uv)
    if weld is None:
        weld = weld_groups(identity.mesh.vertices)
    coarse = perturb_mesh(mesh, sigma_noise, seed, frame, weld)
    images = [render(gt, cam, settings) for cam in cameras]
    return Frame(gt, mesh, coarse, images)
