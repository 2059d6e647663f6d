"""Linear avatar over Gaussian textures.

Skinning-based canonicalization, a joint PCA model over all splat
attributes, coefficient fitting, and the texture editing operators
(interpolation, region swap, expression transfer).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .core_math import matrix_to_quat, quat_conjugate, quat_multiply, quat_normalize
from .gaussians import ATTRIBUTES, CHANNELS, GaussianTexture

OPACITY_CLAMP = (1e-4, 1.0 - 1e-4)
SCALE_FLOOR = 1e-6
# attribute classes frozen to the mean inside the static mask
STATIC_CLASSES = ("color", "opacity", "scale")


class DegenerateTransformError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# skinning
# ---------------------------------------------------------------------------

@dataclass
class SkinningRig:
    rest: np.ndarray  # (J, 4, 4) rigid
    posed: np.ndarray  # (J, 4, 4) rigid
    weights: np.ndarray  # (..., J), rows sum to 1

    def __post_init__(self):
        self.rest = np.asarray(self.rest, dtype=np.float64)
        self.posed = np.asarray(self.posed, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        J = self.rest.shape[0]
        if self.posed.shape != (J, 4, 4) or self.rest.shape != (J, 4, 4) or self.weights.shape[-1] != J:
            raise ValueError("rig shapes disagree")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(-1) - 1.0) > 1e-6):
            raise ValueError("skinning weights must be non-negative and sum to 1")

    @property
    def n_joints(self) -> int:
        return self.rest.shape[0]

    def joint_transforms(self) -> np.ndarray:
        """posed_j composed with the inverse rest transform, (J, 4, 4)."""
        return self.posed @ np.linalg.inv(self.rest)


def blend_transforms(rig: SkinningRig) -> np.ndarray:
    """Weight-blended joint matrices snapped to the nearest rigid transform, (..., 4, 4)."""
    M = np.einsum("...j,jab->...ab", rig.weights, rig.joint_transforms())
    A = M[..., :3, :3]
    det = np.linalg.det(A)
    if np.any(det < 1e-6):
        raise DegenerateTransformError("blended transform is degenerate")
    U, _, Vt = np.linalg.svd(A)
    R = U @ Vt
    out = np.zeros_like(M)
    out[..., :3, :3] = R
    out[..., :3, 3] = M[..., :3, 3]
    out[..., 3, 3] = 1.0
    return out


def apply_blended(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.einsum("...ab,...b->...a", T[..., :3, :3], points) + T[..., :3, 3]


def _transform_texture(g: GaussianTexture, T: np.ndarray, inverse: bool) -> GaussianTexture:
    if T.shape[:2] != g.shape:
        raise LayoutMismatchError("rig weights do not cover the texture grid")
    out = g.copy()
    v = g.valid
    R = T[v][:, :3, :3]
    t = T[v][:, :3, 3]
    if inverse:
        R = np.swapaxes(R, -1, -2)
        out.position[v] = np.einsum("nab,nb->na", R, g.position[v] - t)
    else:
        out.position[v] = np.einsum("nab,nb->na", R, g.position[v]) + t
    out.rotation[v] = quat_normalize(quat_multiply(matrix_to_quat(R), g.rotation[v]))
    return out


def canonicalize(g: GaussianTexture, rig: SkinningRig) -> GaussianTexture:
    """Undo the per-texel blended skinning transform (inverse LBS)."""
    return _transform_texture(g, blend_transforms(rig), inverse=True)


def pose(g: GaussianTexture, rig: SkinningRig) -> GaussianTexture:
    """Apply the per-texel blended skinning transform (forward LBS)."""
    return _transform_texture(g, blend_transforms(rig), inverse=False)


# ---------------------------------------------------------------------------
# joint PCA model
# ---------------------------------------------------------------------------

def _class_index() -> np.ndarray:
    """Attribute-class id of each of the 14 channels."""
    idx = np.empty(CHANNELS, dtype=np.int64)
    for c, sl in enumerate(ATTRIBUTES.values()):
        idx[sl] = c
    return idx


CLASS_OF_CHANNEL = _class_index()


@dataclass
class GemModel:
    mean: np.ndarray  # (D,) standardized
    basis: np.ndarray  # (D, K) orthonormal columns
    valid: np.ndarray  # (H, W) bool texel layout
    static_mask: np.ndarray  # (H, W) bool
    class_scale: np.ndarray  # (5,) RMS deviation per attribute class
    explained_variance: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.basis.shape[1]

    @property
    def D(self) -> int:
        return self.mean.shape[0]

    def channel_scale(self) -> np.ndarray:
        """Standardization divisor per flattened entry, (D,)."""
        return np.tile(self.class_scale[CLASS_OF_CHANNEL], int(self.valid.sum()))

    def static_entries(self) -> np.ndarray:
        return _static_entries(self.valid, self.static_mask)


def _static_entries(valid: np.ndarray, static_mask: np.ndarray) -> np.ndarray:
    frozen_ch = np.zeros(CHANNELS, dtype=bool)
    for name in STATIC_CLASSES:
        frozen_ch[ATTRIBUTES[name]] = True
    per_texel = static_mask[valid]
    return (per_texel[:, None] & frozen_ch[None, :]).ravel()


def flatten(g: GaussianTexture, valid: np.ndarray | None = None) -> np.ndarray:
    """Valid texels in raster order, 14 channels each."""
    valid = g.valid if valid is None else valid
    if g.shape != valid.shape or np.any(valid & ~g.valid):
        raise LayoutMismatchError("texture does not match the model layout")
    return g.as_array()[valid].ravel()


def unflatten(x: np.ndarray, valid: np.ndarray) -> GaussianTexture:
    arr = np.zeros(valid.shape + (CHANNELS,))
    arr[..., 10] = 1.0  # identity rotation in invalid texels
    arr[valid] = x.reshape(-1, CHANNELS)
    return GaussianTexture.from_array(arr, valid)


def pca_fit(frames: list[GaussianTexture], K: int, static_mask: np.ndarray | None = None) -> GemModel:
    N = len(frames)
    if N < 2:
        raise ValueError("need at least two frames")
    if K < 1 or K > N - 1:
        raise ValueError(f"K must lie in [1, {N - 1}]")
    valid = frames[0].valid.copy()
    if any(not np.array_equal(f.valid, valid) for f in frames):
        raise LayoutMismatchError("frames have different validity masks")
    if static_mask is None:
        static_mask = np.zeros_like(valid)
    static_mask = np.asarray(static_mask, dtype=bool) & valid
    X = np.stack([flatten(f, valid) for f in frames])
    if np.all(X == X[0]):
        raise ValueError("all frames are identical")
    centered = X - X.mean(axis=0)
    ch = np.tile(CLASS_OF_CHANNEL, int(valid.sum()))
    class_scale = np.ones(len(ATTRIBUTES))
    for c in range(len(ATTRIBUTES)):
        rms = np.sqrt(np.mean(centered[:, ch == c] ** 2))
        # a class that varies only by rounding is treated as constant
        if rms > 1e-12 * max(np.abs(X[:, ch == c]).max(), 1.0):
            class_scale[c] = rms
    Xs = X / class_scale[ch]
    mean = Xs.mean(axis=0)
    Z = Xs - mean
    frozen = _static_entries(valid, static_mask)
    Z[:, frozen] = 0.0
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    B = Vt[:K].T.copy()
    B[frozen] = 0.0
    pivot = np.argmax(np.abs(B), axis=0)
    B *= np.sign(B[pivot, np.arange(K)])
    return GemModel(mean, B, valid, static_mask, class_scale, s[:K] ** 2 / (N - 1))


def standardize(model: GemModel, g: GaussianTexture) -> np.ndarray:
    return flatten(g, model.valid) / model.channel_scale()


def reconstruct_flat(model: GemModel, k) -> np.ndarray:
    """mu + B k in standardized space, before any clamping."""
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (model.K,):
        raise ValueError(f"expected {model.K} coefficients")
    x = model.mean + model.basis @ k
    frozen = model.static_entries()
    x[frozen] = model.mean[frozen]
    return x


def gem_reconstruct(model: GemModel, k) -> GaussianTexture:
    x = reconstruct_flat(model, k) * model.channel_scale()
    g = unflatten(x, model.valid)
    v = g.valid
    g.color[v] = np.clip(g.color[v], 0.0, 1.0)
    g.opacity[v] = np.clip(g.opacity[v], *OPACITY_CLAMP)
    g.scale[v] = np.maximum(g.scale[v], SCALE_FLOOR)
    q = g.rotation[v]
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    g.rotation[v] = np.where(n > 1e-12, q / np.maximum(n, 1e-300), np.array([1.0, 0, 0, 0]))
    return g


def fit_coefficients(model: GemModel, g: GaussianTexture) -> np.ndarray:
    return model.basis.T @ (standardize(model, g) - model.mean)


def reconstruction_errors(model: GemModel, frames: list[GaussianTexture]) -> np.ndarray:
    """RMS standardized residual of each frame's projection onto the model."""
    out = []
    for f in frames:
        x = standardize(model, f)
        r = x - reconstruct_flat(model, fit_coefficients(model, f))
        out.append(np.sqrt(np.mean(r * r)))
    return np.array(out)


def truncate(model: GemModel, K: int) -> GemModel:
    if K < 1 or K > model.K:
        raise ValueError("K out of range")
    return GemModel(model.mean, model.basis[:, :K].copy(), model.valid, model.static_mask,
                    model.class_scale, model.explained_variance[:K])


def refine_mean(model: GemModel, frames: list[GaussianTexture]) -> GemModel:
    """Replace mu by the mean of the clamped reconstructions of the frames."""
    recon = [standardize(model, gem_reconstruct(model, fit_coefficients(model, f))) for f in frames]
    return GemModel(np.mean(recon, axis=0), model.basis, model.valid, model.static_mask,
                    model.class_scale, model.explained_variance)


_MODEL_MAGIC = "SPLATTEX-GEM"


def save_model(path, model: GemModel) -> None:
    H, W = model.valid.shape
    header = {
        "D": model.D, "K": model.K, "height": H, "width": W, "channels": CHANNELS,
        "attributes": {k: [s.start, s.stop] for k, s in ATTRIBUTES.items()},
        "class_scale": model.class_scale.tolist(),
        "explained_variance": model.explained_variance.tolist(),
        "dtype": "float32-le",
    }
    with open(path, "wb") as f:
        f.write(f"{_MODEL_MAGIC}\n{json.dumps(header, sort_keys=True)}\n".encode())
        f.write(np.packbits(model.valid.ravel()).tobytes())
        f.write(np.packbits(model.static_mask.ravel()).tobytes())
        f.write(model.mean.astype("<f4").tobytes())
        f.write(model.basis.astype("<f4").tobytes())


def load_model(path) -> GemModel:
    data = Path(path).read_bytes()
    magic, rest = data.split(b"\n", 1)
    if magic.decode() != _MODEL_MAGIC:
        raise ValueError("not a GEM model file")
    line, body = rest.split(b"\n", 1)
    h = json.loads(line)
    n = h["height"] * h["width"]
    nb = (n + 7) // 8
    valid = np.unpackbits(np.frombuffer(body[:nb], np.uint8))[:n].reshape(h["height"], h["width"]).astype(bool)
    static = np.unpackbits(np.frombuffer(body[nb:2 * nb], np.uint8))[:n].reshape(valid.shape).astype(bool)
    off = 2 * nb
    D, K = h["D"], h["K"]
    mean = np.frombuffer(body, "<f4", D, off).astype(np.float64)
    basis = np.frombuffer(body, "<f4", D * K, off + 4 * D).astype(np.float64).reshape(D, K)
    return GemModel(mean, basis, valid, static, np.array(h["class_scale"]), np.array(h["explained_variance"]))


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def _check_layout(*gs: GaussianTexture) -> None:
    for g in gs[1:]:
        if g.shape != gs[0].shape or not np.array_equal(g.valid, gs[0].valid):
            raise LayoutMismatchError("textures have different layouts")


def _blend(a: GaussianTexture, b: GaussianTexture, gamma: np.ndarray) -> GaussianTexture:
    """Per-texel blend; rotations by normalized linear blend on one hemisphere."""
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), a.shape)
    g3 = g[..., None]
    qb = b.rotation * np.where((a.rotation * b.rotation).sum(-1, keepdims=True) < 0, -1.0, 1.0)
    q = (1.0 - g3) * a.rotation + g3 * qb
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(n > 1e-12, q / np.maximum(n, 1e-300), a.rotation)
    return GaussianTexture(
        (1.0 - g3) * a.color + g3 * b.color,
        (1.0 - g) * a.opacity + g * b.opacity,
        (1.0 - g3) * a.position + g3 * b.position,
        (1.0 - g3) * a.scale + g3 * b.scale,
        q, a.valid.copy(),
    )


def interpolate(a: GaussianTexture, b: GaussianTexture, gamma: float) -> GaussianTexture:
    _check_layout(a, b)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0.0:
        return a.copy()
    if gamma == 1.0:
        return b.copy()
    return _blend(a, b, gamma)


def smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def swap_weights(mask: np.ndarray, feather: float) -> np.ndarray:
    """1 inside the mask, easing to 0 over `feather` texels outside it."""
    mask = np.asarray(mask, dtype=bool)
    w = mask.astype(np.float64)
    if feather <= 0 or not mask.any() or mask.all():
        return w
    dist = distance_transform_edt(~mask)
    return np.where(mask, 1.0, smoothstep(1.0 - dist / feather))


def region_swap(src: GaussianTexture, tgt: GaussianTexture, mask: np.ndarray, feather: float = 0.0) -> GaussianTexture:
    _check_layout(src, tgt)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != src.shape:
        raise LayoutMismatchError("mask does not match the texture grid")
    if not mask.any():
        return src.copy()
    if mask.all():
        return tgt.copy()
    w = swap_weights(mask, feather)
    out = src.copy()
    inside = w == 1.0
    band = (w > 0.0) & ~inside
    blended = _blend(src, tgt, w)
    t_arr, b_arr, o_arr = tgt.as_array(), blended.as_array(), out.as_array()
    o_arr[inside] = t_arr[inside]
    o_arr[band] = b_arr[band]
    return GaussianTexture.from_array(o_arr, src.valid)


def expression_transfer(src_neutral: GaussianTexture, tgt_neutral: GaussianTexture,
                        tgt_expr: GaussianTexture) -> GaussianTexture:
    """Add the target's expression residual to the source neutral.

    Scales combine multiplicatively (additive in log space); rotations
    compose the target's relative rotation onto the source.
    """
    _check_layout(src_neutral, tgt_neutral, tgt_expr)
    out = src_neutral.copy()
    v = out.valid
    s, n, e = (g.as_array()[v] for g in (src_neutral, tgt_neutral, tgt_expr))
    col, opa, pos, sca, rot = (ATTRIBUTES[k] for k in ATTRIBUTES)
    rel = quat_normalize(quat_multiply(quat_conjugate(n[:, rot]), e[:, rot]))
    # unchanged rotations give exactly the identity, not a rounded product
    rel[np.all(n[:, rot] == e[:, rot], axis=1)] = [1.0, 0.0, 0.0, 0.0]
    out.color[v] = np.clip(s[:, col] + (e[:, col] - n[:, col]), 0.0, 1.0)
    out.opacity[v] = np.clip(s[:, 3] + (e[:, 3] - n[:, 3]), *OPACITY_CLAMP)
    out.position[v] = s[:, pos] + (e[:, pos] - n[:, pos])
    out.scale[v] = np.maximum(s[:, sca] * (e[:, sca] / n[:, sca]), SCALE_FLOOR)
    # product of unit quaternions; not renormalized so a zero residual is exact
    out.rotation[v] = quat_multiply(s[:, rot], rel)
    return out
