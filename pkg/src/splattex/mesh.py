"""Fixed-topology triangle meshes: rasterization, UV baking, reprojection,
texture sampling and surface metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import Camera, RigidPose, CameraIntrinsics, project_points

INSIDE_TOL = 1e-12
NEAR_EPS = 1e-9
NO_COLOR_FILL = 0.5


class AtlasOverlapWarning(UserWarning):
    """Two UV triangles cover the same texel interior."""


class InvalidSampleError(ValueError):
    """Every bilinear neighbour of a sample location is invalid."""


class TopologyMismatchError(ValueError):
    pass


@dataclass
class TopologyMesh:
    vertices: np.ndarray  # (N, 3) metres
    faces: np.ndarray  # (F, 3) int
    uvs: np.ndarray  # (N, 2) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uvs = np.asarray(self.uvs, dtype=np.float64)

    def validate(self) -> None:
        n = len(self.vertices)
        if self.faces.min() < 0 or self.faces.max() >= n:
            raise ValueError("face index out of range")
        if self.uvs.shape != (n, 2):
            raise ValueError("need one uv per vertex")
        if self.uvs.min() < 0.0 or self.uvs.max() > 1.0:
            raise ValueError("uv coordinates must lie in [0, 1]")
        if np.any(np.abs(uv_face_areas(self)) <= 0.0):
            raise ValueError("face with zero area in uv space")

    def with_vertices(self, vertices: np.ndarray) -> "TopologyMesh":
        return TopologyMesh(np.asarray(vertices, dtype=np.float64).copy(), self.faces, self.uvs)

    @property
    def scene_scale(self) -> float:
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def uv_face_areas(mesh: TopologyMesh) -> np.ndarray:
    a, b, c = (mesh.uvs[mesh.faces[:, i]] for i in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def vertex_normals(mesh: TopologyMesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for i in range(3):
        np.add.at(n, f[:, i], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


# ---------------------------------------------------------------------------
# triangle scan conversion shared by rasterization and baking
# ---------------------------------------------------------------------------

def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _scan_triangle(p: np.ndarray, height: int, width: int):
    """Pixel centers covered by the 2D triangle ``p`` (3x2, continuous pixel
    units). Returns rows, cols and affine barycentrics, or None."""
    area = _edge(p[0, 0], p[0, 1], p[1, 0], p[1, 1], p[2, 0], p[2, 1])
    if not np.isfinite(area) or abs(area) < 1e-14:
        return None
    x0 = max(int(np.floor(p[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(p[:, 0].max() - 0.5)), width - 1)
    y0 = max(int(np.floor(p[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(p[:, 1].max() - 0.5)), height - 1)
    if x0 > x1 or y0 > y1:
        return None
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px, py = xs + 0.5, ys + 0.5
    w0 = _edge(p[1, 0], p[1, 1], p[2, 0], p[2, 1], px, py) / area
    w1 = _edge(p[2, 0], p[2, 1], p[0, 0], p[0, 1], px, py) / area
    w2 = _edge(p[0, 0], p[0, 1], p[1, 0], p[1, 1], px, py) / area
    inside = (w0 >= -INSIDE_TOL) & (w1 >= -INSIDE_TOL) & (w2 >= -INSIDE_TOL)
    if not inside.any():
        return None
    w = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return ys[inside], xs[inside], w


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

@dataclass
class RasterBuffer:
    face: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct
    depth: np.ndarray  # (H, W), inf where empty
    uv: np.ndarray  # (H, W, 2), nan where empty

    @property
    def valid(self) -> np.ndarray:
        return self.face >= 0

    @property
    def shape(self):
        return self.face.shape


def rasterize(mesh: TopologyMesh, pose: RigidPose, K: CameraIntrinsics) -> RasterBuffer:
    """Z-buffered rasterization with perspective-correct barycentrics.

    Faces with any vertex at or behind the camera plane are dropped (no
    clipping). Depth ties keep the lower face index.
    """
    H, W = K.height, K.width
    face_buf = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    zbuf = np.full((H, W), np.inf)
    pix, z = project_points(mesh.vertices, pose, K)
    for fi, tri in enumerate(mesh.faces):
        zt = z[tri]
        if np.any(zt <= NEAR_EPS):
            continue
        hit = _scan_triangle(pix[tri], H, W)
        if hit is None:
            continue
        ys, xs, w = hit
        wz = w / zt
        s = wz.sum(axis=1)
        depth = 1.0 / s
        closer = depth < zbuf[ys, xs]
        if not closer.any():
            continue
        ys, xs = ys[closer], xs[closer]
        zbuf[ys, xs] = depth[closer]
        face_buf[ys, xs] = fi
        bary[ys, xs] = wz[closer] / s[closer, None]
    uv = np.full((H, W, 2), np.nan)
    valid = face_buf >= 0
    f = mesh.faces[face_buf[valid]]
    b = bary[valid]
    uv[valid] = np.einsum("nk,nkc->nc", b, mesh.uvs[f])
    return RasterBuffer(face_buf, bary, zbuf, uv)


# ---------------------------------------------------------------------------
# baked textures
# ---------------------------------------------------------------------------

@dataclass
class BakedTexture:
    """(H, W, C) texel values plus a validity mask. Invalid texels hold
    ``fill`` (NaN for geometry, 0.5 for colour)."""

    values: np.ndarray
    valid: np.ndarray
    fill: float = float("nan")

    @property
    def shape(self):
        return self.valid.shape

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def filled(self, value: float = 0.0) -> np.ndarray:
        return np.where(self.valid[..., None], self.values, value)


@dataclass
class UVBake:
    """Per-texel face assignment and barycentrics of a UV atlas."""

    face: np.ndarray  # (H, W) int, -1 outside the atlas
    bary: np.ndarray  # (H, W, 3)

    @property
    def valid(self) -> np.ndarray:
        return self.face >= 0


def uv_bake_map(mesh: TopologyMesh, height: int, width: int) -> UVBake:
    """Which face covers each texel center, keeping the lowest face index.

    Texel (r, c) has its center at uv = ((c + .5)/W, (r + .5)/H).
    """
    face_buf = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    interior = np.zeros((height, width), dtype=bool)
    scale = np.array([width, height], dtype=np.float64)
    overlaps = 0
    for fi, tri in enumerate(mesh.faces):
        hit = _scan_triangle(mesh.uvs[tri] * scale, height, width)
        if hit is None:
            continue
        ys, xs, w = hit
        inner = w.min(axis=1) > 1e-9
        taken = face_buf[ys, xs] >= 0
        overlaps += int(np.count_nonzero(taken & inner & interior[ys, xs]))
        free = ~taken
        ys_f, xs_f = ys[free], xs[free]
        face_buf[ys_f, xs_f] = fi
        bary[ys_f, xs_f] = w[free]
        interior[ys_f, xs_f] = inner[free]
    if overlaps:
        warnings.warn(f"{overlaps} texels are covered by more than one uv triangle",
                      AtlasOverlapWarning, stacklevel=2)
    return UVBake(face_buf, bary)


def bake_attribute(mesh: TopologyMesh, attr: np.ndarray, bake: UVBake) -> BakedTexture:
    attr = np.asarray(attr, dtype=np.float64)
    H, W = bake.face.shape
    values = np.full((H, W, attr.shape[1]), np.nan)
    v = bake.valid
    f = mesh.faces[bake.face[v]]
    values[v] = np.einsum("nk,nkc->nc", bake.bary[v], attr[f])
    return BakedTexture(values, v.copy())


def bake_position_texture(mesh: TopologyMesh, height: int, width: int | None = None) -> BakedTexture:
    width = height if width is None else width
    return bake_attribute(mesh, mesh.vertices, uv_bake_map(mesh, height, width))


def bilinear_sample_image(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) image at continuous pixel coordinates (edge clamp)."""
    H, W = image.shape[:2]
    x = np.clip(xy[..., 0] - 0.5, 0.0, W - 1.0)
    y = np.clip(xy[..., 1] - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _visible_surface_depth(mesh: TopologyMesh, cam: Camera, rb: RasterBuffer,
                           xy: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Depth along the ray through ``xy`` of the plane of the face stored in
    the raster buffer at (rows, cols)."""
    K, pose = cam.K, cam.pose
    f = rb.face[rows, cols]
    tri = mesh.faces[f]
    vc = mesh.vertices[tri] @ pose.matrix.T + pose.translation  # (n, 3, 3)
    n = np.cross(vc[:, 1] - vc[:, 0], vc[:, 2] - vc[:, 0])
    d = np.stack([(xy[:, 0] - K.cx) / K.fx, (xy[:, 1] - K.cy) / K.fy, np.ones(len(xy))], axis=1)
    denom = np.einsum("nc,nc->n", n, d)
    num = np.einsum("nc,nc->n", n, vc[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    return np.where(np.abs(denom) > 1e-15, t, rb.depth[rows, cols])


def reproject_rgb_texture(mesh: TopologyMesh, images, cameras, raster_buffers,
                          size: tuple[int, int], position_texture: BakedTexture | None = None,
                          tau_vis: float | None = None) -> BakedTexture:
    """Average the colours of all views that see each texel.

    A view sees a texel when the texel's projection lands on a covered pixel
    whose surface depth (the stored face's plane, intersected with the texel's
    own ray) agrees with the texel depth within ``tau_vis``. Texels seen by no
    view get 0.5 gray and are flagged invalid.
    """
    if position_texture is None:
        position_texture = bake_position_texture(mesh, *size)
    if tau_vis is None:
        tau_vis = 1e-3 * mesh.scene_scale
    H, W = position_texture.shape
    geo = position_texture.valid
    pts = position_texture.values[geo]
    acc = np.zeros((len(pts), 3))
    cnt = np.zeros(len(pts))
    for img, cam, rb in zip(images, cameras, raster_buffers):
        img = np.asarray(img, dtype=np.float64)
        xy, z = project_points(pts, cam.pose, cam.K)
        safe = np.clip(np.nan_to_num(xy, nan=-1.0), -1.0, 1e9)
        cols = np.floor(safe[:, 0]).astype(np.int64)
        rows = np.floor(safe[:, 1]).astype(np.int64)
        ok = (z > NEAR_EPS) & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
        idx = np.nonzero(ok)[0]
        covered = rb.face[rows[idx], cols[idx]] >= 0
        idx = idx[covered]
        surf = _visible_surface_depth(mesh, cam, rb, xy[idx], rows[idx], cols[idx])
        vis = idx[np.abs(surf - z[idx]) <= tau_vis]
        acc[vis] += bilinear_sample_image(img, xy[vis])
        cnt[vis] += 1
    values = np.full((H, W, 3), NO_COLOR_FILL)
    seen = cnt > 0
    col = np.full((len(pts), 3), NO_COLOR_FILL)
    col[seen] = acc[seen] / cnt[seen, None]
    values[geo] = col
    valid = np.zeros((H, W), dtype=bool)
    valid[geo] = seen
    return BakedTexture(values, valid, fill=NO_COLOR_FILL)


def sample_texture(values: np.ndarray, valid: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup at uv coordinates using valid texels only."""
    H, W = valid.shape
    uvs = np.asarray(uvs, dtype=np.float64)
    x = np.clip(uvs[:, 0] * W - 0.5, 0.0, W - 1.0)
    y = np.clip(uvs[:, 1] * H - 0.5, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    safe = np.where(valid[..., None], values, 0.0)
    corners = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
               (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
    acc = np.zeros((len(uvs), values.shape[-1]))
    wsum = np.zeros(len(uvs))
    for yy, xx, w in corners:
        w = w * valid[yy, xx]
        acc += w[:, None] * safe[yy, xx]
        wsum += w
    if np.any(wsum <= 0.0):
        bad = int(np.argmax(wsum <= 0.0))
        raise InvalidSampleError(f"uv {uvs[bad].tolist()} has no valid bilinear neighbour")
    return acc / wsum[:, None]


def extract_mesh_from_texture(positions: np.ndarray, valid: np.ndarray, template: TopologyMesh) -> TopologyMesh:
    """Template-topology mesh whose vertices sample a position texture at the
    template's uv coordinates."""
    return template.with_vertices(sample_texture(positions, valid, template.uvs))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _closest_on_segment(p, a, b):
    ab = b - a
    ll = np.einsum("...c,...c->...", ab, ab)
    t = np.einsum("...c,...c->...", p - a, ab) / np.where(ll > 0, ll, 1.0)
    t = np.clip(np.where(ll > 0, t, 0.0), 0.0, 1.0)
    return a + t[..., None] * ab


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Voronoi-region closest point (Ericson, RTCD 5.1.5), broadcast over
    points and triangles. Degenerate triangles fall back to their edges."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...c,...c->...", ab, ap)
    d2 = np.einsum("...c,...c->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...c,...c->...", ab, bp)
    d4 = np.einsum("...c,...c->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...c,...c->...", ab, cp)
    d6 = np.einsum("...c,...c->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast(d1, d2).shape
    out = np.empty(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = np.broadcast_to(value, shape + (3,))[m]
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(shape, dtype=bool), a + v[..., None] * ab + w[..., None] * ac)

    n = np.cross(ab, ac)
    area2 = np.einsum("...c,...c->...", n, n)
    scale = np.maximum(np.einsum("...c,...c->...", ab, ab), np.einsum("...c,...c->...", ac, ac))
    degenerate = np.broadcast_to(area2 <= 1e-20 * np.maximum(scale, 1e-300) ** 2 + 1e-300, shape)
    if degenerate.any() or not np.all(np.isfinite(out)):
        bad = degenerate | ~np.all(np.isfinite(out), axis=-1)
        cands = [_closest_on_segment(p, a, b), _closest_on_segment(p, b, c), _closest_on_segment(p, c, a)]
        cands = [np.broadcast_to(q, shape + (3,)) for q in cands]
        dist = np.stack([np.linalg.norm(q - p, axis=-1) for q in cands])
        pick = np.argmin(dist, axis=0)
        fallback = np.choose(pick[..., None], cands)
        out[bad] = fallback[bad]
    return out


def point_to_surface_distances(points: np.ndarray, mesh: TopologyMesh, chunk: int = 128) -> np.ndarray:
    """Distance from each point to the nearest point on any triangle."""
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        q = closest_point_on_triangles(p, a, b, c)
        out[s:s + chunk] = np.linalg.norm(q - p, axis=-1).min(axis=1)
    return out


def p2p_mm(pred: TopologyMesh, gt: TopologyMesh) -> float:
    if pred.vertices.shape != gt.vertices.shape or not np.array_equal(pred.faces, gt.faces):
        raise TopologyMismatchError("P2P needs identical topology")
    return float(np.linalg.norm(pred.vertices - gt.vertices, axis=1).mean() * 1000.0)


def p2s_mm(pred: TopologyMesh, gt: TopologyMesh) -> float:
    return float(point_to_surface_distances(pred.vertices, gt).mean() * 1000.0)


def mesh_metrics(pred: TopologyMesh, gt: TopologyMesh) -> tuple[float, float]:
    """(P2P, P2S) in millimetres."""
    return p2p_mm(pred, gt), p2s_mm(pred, gt)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_obj(path, mesh: TopologyMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in f) for f in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TopologyMesh:
    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:4]:
                vi, _, rest = tok.partition("/")
                ti = rest.partition("/")[0]
                if ti and ti != vi:
                    raise ValueError("OBJ subset requires matching v/vt indices")
                idx.append(int(vi) - 1)
            faces.append(idx)
    return TopologyMesh(np.array(verts), np.array(faces, dtype=np.int64), np.array(uvs))


TEXTURE_MAGIC = "SPLATTEX-TEXTURE"


def write_texture(path, values: np.ndarray, valid: np.ndarray) -> None:
    """8-line text header, then float32 texel data, then one validity byte per texel."""
    H, W, C = values.shape
    data = np.ascontiguousarray(values, dtype="<f4").tobytes()
    header = "\n".join([
        TEXTURE_MAGIC,
        "version 1",
        f"height {H}",
        f"width {W}",
        f"channels {C}",
        "dtype float32-le",
        f"validity_offset {len(data)}",
        "end",
    ]) + "\n"
    mask = np.ascontiguousarray(valid, dtype=np.uint8).tobytes()
    Path(path).write_bytes(header.encode("ascii") + data + mask)


def read_texture(path) -> BakedTexture:
    raw = Path(path).read_bytes()
    pos = 0
    fields = {}
    for i in range(8):
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if i == 0:
            if line != TEXTURE_MAGIC:
                raise ValueError(f"{path}: not a texture file")
            continue
        if line == "end":
            continue
        key, _, val = line.partition(" ")
        fields[key] = val
    H, W, C = int(fields["height"]), int(fields["width"]), int(fields["channels"])
    off = int(fields["validity_offset"])
    values = np.frombuffer(raw, dtype="<f4", count=H * W * C, offset=pos).reshape(H, W, C).astype(np.float64)
    valid = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=pos + off).reshape(H, W).astype(bool)
    return BakedTexture(values, valid)
