"""Tokenization, the two attention block types, de-tokenization and the full
forward / backward pass of the UV-texture transformer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..correspondence import TokenLayout
from ..core_math import Camera, plucker_image
from ..gaussians import CHANNELS, COLOR, OPACITY, POSITION, ROTATION, SCALE
from ..prng import Xoshiro256
from .layers import block_bwd, block_fwd, linear_bwd

SCALE_TARGET = 5e-4
SCALE_BIAS = float(np.log(SCALE_TARGET))
SCALE_CLAMP = (-12.0, 1.0)
ROT_EPS = 1e-8
IMG_FEATURES = 9  # rgb + plucker (direction, moment)
UV_FEATURES = 6  # position + rgb

BLOCK_KEYS = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    blocks: tuple = ("reg", "grp", "reg", "grp")
    uv_size: int = 64
    p_uv: int = 8
    img_size: tuple = (64, 64)
    p_img: int = 8
    views: int = 4
    k: int = 16
    lam: float = 0.1
    mlp_ratio: int = 4
    # length unit (metres) of the position channels entering the UV projection
    # and of the position offsets leaving the head
    uv_position_unit: float = 0.01
    # slot for fused pretrained image features; only "none" is implemented
    image_feature_fusion: str = "none"

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.img_size = tuple(self.img_size)
        if any(b not in ("reg", "grp") for b in self.blocks):
            raise ValueError("blocks must be 'reg' or 'grp'")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.uv_size % self.p_uv or self.img_size[0] % self.p_img or self.img_size[1] % self.p_img:
            raise ValueError("sizes must be divisible by patch sizes")
        if self.image_feature_fusion != "none":
            raise ValueError("only image_feature_fusion='none' is available")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(d=512, heads=8, blocks=("reg", "grp") * 6, uv_size=1024, p_uv=16,
                   img_size=(640, 512), p_img=8, views=12, k=100)

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout.from_sizes(self.uv_size, self.p_uv, self.img_size, self.p_img, self.views)

    @property
    def n_uv(self) -> int:
        return (self.uv_size // self.p_uv) ** 2

    @property
    def n_img(self) -> int:
        return (self.img_size[0] // self.p_img) * (self.img_size[1] // self.p_img)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["blocks"] = list(self.blocks)
        out["img_size"] = list(self.img_size)
        return out


def param_shapes(cfg: ModelConfig) -> dict:
    d, h = cfg.d, cfg.mlp_ratio * cfg.d
    shapes = {
        "img_proj.w": (IMG_FEATURES * cfg.p_img**2, d),
        "img_proj.b": (d,),
        "uv_pos": (cfg.n_uv, d),
        "uv_proj.w": (UV_FEATURES * cfg.p_uv**2 + d, d),
        "uv_proj.b": (d,),
    }
    block = {key: (d,) for key in BLOCK_KEYS}
    block.update({"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
                  "mlp.w1": (d, h), "mlp.b1": (h,), "mlp.w2": (h, d)})
    for i in range(len(cfg.blocks)):
        for key in BLOCK_KEYS:
            shapes[f"blocks.{i}.{key}"] = block[key]
    shapes["head.w"] = (d, cfg.p_uv**2 * CHANNELS)
    shapes["head.b"] = (cfg.p_uv**2 * CHANNELS,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Xavier-normal projections, unit LayerNorm gains, zero biases and a
    zero output head (so the first forward pass returns the skip inputs)."""
    rng = Xoshiro256(seed, 0x1A17)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head."):
            params[name] = np.zeros(shape)
        elif name == "uv_pos":
            params[name] = rng.normal(shape, std=0.02)
        elif len(shape) == 2:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = rng.normal(shape, std=std)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def block_params(params: dict, i: int) -> dict:
    pre = f"blocks.{i}."
    return {k: params[pre + k] for k in BLOCK_KEYS}


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def patchify(grid: np.ndarray, p: int) -> np.ndarray:
    """(H, W, C) -> (H/p * W/p, p*p*C), patches in raster order, each flattened
    as (row, col, channel)."""
    H, W, C = grid.shape
    if H % p or W % p:
        raise ValueError(f"grid {H}x{W} is not divisible by patch size {p}")
    return grid.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * C)


def unpatchify(tokens: np.ndarray, p: int, H: int, W: int) -> np.ndarray:
    C = tokens.shape[1] // (p * p)
    return tokens.reshape(H // p, W // p, p, p, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)


def image_features(image: np.ndarray, cam: Camera) -> np.ndarray:
    """Per-pixel RGB concatenated with the Plücker ray (direction, moment)."""
    return np.concatenate([np.asarray(image, dtype=np.float64), plucker_image(cam)], axis=-1)


def image_patches(images, cameras, p_img: int) -> np.ndarray:
    """(V, n_img, 9 * p_img^2) raw patch vectors."""
    out = []
    for img, cam in zip(images, cameras):
        if img.shape[0] % p_img or img.shape[1] % p_img:
            raise ValueError("image size must be divisible by the patch size")
        out.append(patchify(image_features(img, cam), p_img))
    return np.stack(out)


def tokenize_images(images, cameras, p_img: int, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(V, n_img, d) image tokens."""
    return image_patches(images, cameras, p_img) @ w + b


def uv_patches(position: np.ndarray, rgb: np.ndarray, valid: np.ndarray, p_uv: int,
               position_unit: float = 1.0) -> np.ndarray:
    feats = np.concatenate([position / position_unit, rgb], axis=-1)
    feats = np.where(valid[..., None], feats, 0.0)
    return patchify(feats, p_uv)


def tokenize_uv(position: np.ndarray, rgb: np.ndarray, valid: np.ndarray, pos_embeddings: np.ndarray,
                p_uv: int, w: np.ndarray, b: np.ndarray, position_unit: float = 1.0):
    """UV tokens plus the (position, colour) snapshot used by the skips."""
    patches = uv_patches(position, rgb, valid, p_uv, position_unit)
    if len(patches) != len(pos_embeddings):
        raise ValueError("one positional embedding per UV token is required")
    tokens = np.concatenate([patches, pos_embeddings], axis=1) @ w + b
    snapshot = {"position": np.where(valid[..., None], position, 0.0), "color": rgb.copy(), "valid": valid.copy()}
    return tokens, snapshot


# ---------------------------------------------------------------------------
# attention blocks
# ---------------------------------------------------------------------------

def _scatter_mean_plan(flat_idx: np.ndarray, n_total: int):
    """Stable grouping of occurrences by image token for a deterministic mean."""
    flat = flat_idx.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    uniq, starts, counts = np.unique(sorted_idx, return_index=True, return_counts=True)
    return order, uniq, starts, counts


def reg_guided_block_fwd(x_uv, x_img, flat_idx, p, heads):
    """Each UV token runs self-attention with its k selected image tokens; the
    image tokens take the mean of their updates over every group they occur in."""
    T, k = flat_idx.shape
    d = x_uv.shape[1]
    groups = np.concatenate([x_uv[:, None, :], x_img[flat_idx]], axis=1)
    out, cache = block_fwd(groups, p, heads)
    new_uv = out[:, 0].copy()
    order, uniq, starts, counts = _scatter_mean_plan(flat_idx, len(x_img))
    occ = out[:, 1:].reshape(-1, d)[order]
    new_img = x_img.copy()
    if len(uniq):
        new_img[uniq] = np.add.reduceat(occ, starts, axis=0) / counts[:, None]
    return new_uv, new_img, (cache, flat_idx, order, uniq, starts, counts)


def reg_guided_block_bwd(d_uv, d_img, cache, p):
    bcache, flat_idx, order, uniq, starts, counts = cache
    T, k = flat_idx.shape
    d = d_uv.shape[1]
    scale = np.zeros(len(d_img))
    scale[uniq] = 1.0 / counts
    dout = np.empty((T, k + 1, d))
    dout[:, 0] = d_uv
    dout[:, 1:] = (d_img * scale[:, None])[flat_idx]
    dx_img = d_img.copy()
    dx_img[uniq] = 0.0  # averaged tokens receive gradient only through their groups
    dgroups, grads = block_bwd(dout, bcache, p)
    dx_uv = dgroups[:, 0]
    occ = dgroups[:, 1:].reshape(-1, d)[order]
    if len(uniq):
        dx_img[uniq] += np.add.reduceat(occ, starts, axis=0)
    return dx_uv, dx_img, grads


def grouped_block_fwd(x_uv, x_img, views, p, heads):
    """Self-attention over all UV tokens, and separately over each view's tokens."""
    d = x_img.shape[1]
    c_uv = None
    new_uv = x_uv
    if len(x_uv):
        out, c_uv = block_fwd(x_uv[None], p, heads)
        new_uv = out[0]
    out_img, c_img = block_fwd(x_img.reshape(views, -1, d), p, heads)
    return new_uv, out_img.reshape(-1, d), (c_uv, c_img, views)


def grouped_block_bwd(d_uv, d_img, cache, p):
    c_uv, c_img, views = cache
    d = d_img.shape[1]
    dx_img, grads = block_bwd(d_img.reshape(views, -1, d), c_img, p)
    dx_uv = d_uv
    if c_uv is not None:
        dx_uv, g_uv = block_bwd(d_uv[None], c_uv, p)
        dx_uv = dx_uv[0]
        for key in grads:
            grads[key] = grads[key] + g_uv[key]
    return dx_uv, dx_img.reshape(-1, d), grads


# ---------------------------------------------------------------------------
# de-tokenization
# ---------------------------------------------------------------------------

def detokenize_fwd(raw: np.ndarray, init_position: np.ndarray, init_color: np.ndarray,
                   position_unit: float = 1.0):
    """Raw (H, W, 14) head output -> activated texture fields. Position offsets
    are read in ``position_unit`` metres."""
    c_lin = init_color + raw[..., COLOR]
    color = np.clip(c_lin, 0.0, 1.0)
    opacity = 1.0 / (1.0 + np.exp(-raw[..., 3]))
    position = init_position + position_unit * raw[..., POSITION]
    s_lin = raw[..., SCALE] + SCALE_BIAS
    s_clip = np.clip(s_lin, *SCALE_CLAMP)
    scale = np.exp(s_clip)
    q = raw[..., ROTATION]
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    ok = norm > ROT_EPS
    rotation = np.where(ok, q / np.where(ok, norm, 1.0), np.array([1.0, 0.0, 0.0, 0.0]))
    fields = {"color": color, "opacity": opacity, "position": position, "scale": scale, "rotation": rotation}
    cache = (c_lin, opacity, s_lin, scale, q, norm, ok, rotation, position_unit)
    return fields, cache


def detokenize_bwd(dfields: dict, cache) -> np.ndarray:
    c_lin, opacity, s_lin, scale, q, norm, ok, rotation, position_unit = cache
    draw = np.zeros(c_lin.shape[:2] + (CHANNELS,))
    if "color" in dfields:
        draw[..., COLOR] = dfields["color"] * ((c_lin > 0.0) & (c_lin < 1.0))
    if "opacity" in dfields:
        draw[..., 3] = dfields["opacity"] * opacity * (1.0 - opacity)
    if "position" in dfields:
        draw[..., POSITION] = position_unit * dfields["position"]
    if "scale" in dfields:
        inside = (s_lin > SCALE_CLAMP[0]) & (s_lin < SCALE_CLAMP[1])
        draw[..., SCALE] = dfields["scale"] * scale * inside
    if "rotation" in dfields:
        g = dfields["rotation"]
        n = np.where(ok, norm, 1.0)
        proj = (g * rotation).sum(axis=-1, keepdims=True)
        draw[..., ROTATION] = np.where(ok, (g - rotation * proj) / n, 0.0)
    return draw


def detokenize_uv(uv_tokens: np.ndarray, snapshot: dict, head_w: np.ndarray, head_b: np.ndarray, p_uv: int,
                  position_unit: float = 1.0):
    """Gaussian texture from processed UV tokens and the tokenizer snapshot."""
    from ..gaussians import GaussianTexture

    H, W = snapshot["valid"].shape
    raw = unpatchify(uv_tokens @ head_w + head_b, p_uv, H, W)
    fields, _ = detokenize_fwd(raw, snapshot["position"], snapshot["color"], position_unit)
    return GaussianTexture(fields["color"], fields["opacity"], fields["position"], fields["scale"],
                           fields["rotation"], snapshot["valid"].copy())


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class FrameInputs:
    """Everything the network consumes for one frame (raw, pre-projection)."""

    img_patches: np.ndarray  # (V, n_img, 9 p_img^2)
    uv_patches: np.ndarray  # (n_uv, 6 p_uv^2)
    flat_idx: np.ndarray  # (n_uv, k) global image-token indices
    init_position: np.ndarray  # (H_uv, W_uv, 3), zero where invalid
    init_color: np.ndarray  # (H_uv, W_uv, 3)
    valid: np.ndarray  # (H_uv, W_uv)
    extras: dict = field(default_factory=dict)


@dataclass
class Forward:
    fields: dict
    raw: np.ndarray
    caches: dict


def forward(params: dict, cfg: ModelConfig, fi: FrameInputs) -> Forward:
    V, n_img, fdim = fi.img_patches.shape
    if V != cfg.views or n_img != cfg.n_img:
        raise ValueError(f"frame has {V} views x {n_img} tokens, model expects {cfg.views} x {cfg.n_img}")
    img_in = fi.img_patches.reshape(-1, fdim)
    x_img = img_in @ params["img_proj.w"] + params["img_proj.b"]
    uv_in = np.concatenate([fi.uv_patches, params["uv_pos"]], axis=1)
    x_uv = uv_in @ params["uv_proj.w"] + params["uv_proj.b"]
    block_caches = []
    for i, kind in enumerate(cfg.blocks):
        bp = block_params(params, i)
        if kind == "reg":
            x_uv, x_img, c = reg_guided_block_fwd(x_uv, x_img, fi.flat_idx, bp, cfg.heads)
        else:
            x_uv, x_img, c = grouped_block_fwd(x_uv, x_img, cfg.views, bp, cfg.heads)
        block_caches.append(c)
    H, W = fi.valid.shape
    y = x_uv @ params["head.w"] + params["head.b"]
    raw = unpatchify(y, cfg.p_uv, H, W)
    fields, c_det = detokenize_fwd(raw, fi.init_position, fi.init_color, cfg.uv_position_unit)
    caches = {"img_in": img_in, "uv_in": uv_in, "blocks": block_caches, "x_uv": x_uv, "det": c_det,
              "x_img_shape": x_img.shape}
    return Forward(fields, raw, caches)


def backward(params: dict, cfg: ModelConfig, fwd: Forward, dfields: dict) -> dict:
    """Parameter gradients given gradients w.r.t. the activated texture fields."""
    c = fwd.caches
    grads = {}
    draw = detokenize_bwd(dfields, c["det"])
    dy = patchify(draw, cfg.p_uv)
    dx_uv, grads["head.w"], grads["head.b"] = linear_bwd(dy, c["x_uv"], params["head.w"])
    dx_img = np.zeros(c["x_img_shape"])
    for i in reversed(range(len(cfg.blocks))):
        bp = block_params(params, i)
        if cfg.blocks[i] == "reg":
            dx_uv, dx_img, g = reg_guided_block_bwd(dx_uv, dx_img, c["blocks"][i], bp)
        else:
            dx_uv, dx_img, g = grouped_block_bwd(dx_uv, dx_img, c["blocks"][i], bp)
        for key, val in g.items():
            grads[f"blocks.{i}.{key}"] = val
    duv_in, grads["uv_proj.w"], grads["uv_proj.b"] = linear_bwd(dx_uv, c["uv_in"], params["uv_proj.w"])
    grads["uv_pos"] = duv_in[:, c["uv_in"].shape[1] - cfg.d:]
    _, grads["img_proj.w"], grads["img_proj.b"] = linear_bwd(dx_img, c["img_in"], params["img_proj.w"])
    return {k: grads[k] for k in params}
