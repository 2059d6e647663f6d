"""Frame preparation, the geometry-stage training loop and inference."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..correspondence import score_matrix, table_from_scores
from ..gaussians import CHANNELS, POSITION, GaussianTexture
from ..mesh import TopologyMesh, bake_position_texture, rasterize, reproject_rgb_texture
from ..prng import Xoshiro256
from .losses import LossWeights, loss_geometry, loss_reg
from .model import FrameInputs, ModelConfig, backward, forward, image_patches, uv_patches
from .optim import Adam, round_f32


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-3
    lr_min: float = 0.0
    warmup: int = 100
    schedule: str = "cosine"  # or "constant"
    batch_size: int = 1
    seed: int = 0
    w_geometry: float = 1e-3
    w_reg: float = 1e-3
    log_every: int = 10
    checkpoint_every: int = 1000
    # independent coarse-mesh noise draws per frame (draw 0 is the stored mesh)
    noise_draws: int = 1
    # learning-rate multiplier for the head outputs that offset positions
    position_lr_scale: float = 1.0
    # gradients are multiplied by this before the Adam update, so that metre-scale
    # losses are not swamped by Adam's epsilon
    loss_scale: float = 1.0

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")
        if self.iterations < 0 or self.batch_size < 1 or self.noise_draws < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and noise_draws >= 1 required")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(w_geometry=self.w_geometry, w_reg=self.w_reg, w_l1=0.0, w_ssim=0.0)

    def lr_at(self, step: int) -> float:
        if self.lr == 0.0:
            return 0.0
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.schedule == "constant":
            return self.lr
        span = max(self.iterations - self.warmup, 1)
        t = min((step - self.warmup) / span, 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * t))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    """Network inputs for one (frame, coarse mesh) pair plus its supervision."""

    inputs: FrameInputs
    target_position: np.ndarray  # (H_uv, W_uv, 3)
    target_valid: np.ndarray  # (H_uv, W_uv)
    frame: int = 0
    draw: int = 0


def prepare_inputs(coarse: TopologyMesh, images, cameras, cfg: ModelConfig) -> FrameInputs:
    """Rasterize the coarse mesh, bake its position and reprojected colour
    textures, and select the attention table."""
    if len(cameras) != cfg.views or len(images) != cfg.views:
        raise ValueError(f"model expects {cfg.views} views, got {len(images)}")
    rbs = [rasterize(coarse, cam.pose, cam.K) for cam in cameras]
    pos = bake_position_texture(coarse, cfg.uv_size)
    rgb = reproject_rgb_texture(coarse, images, cameras, rbs, (cfg.uv_size, cfg.uv_size), position_texture=pos)
    table = table_from_scores(score_matrix(rbs, cfg.layout, cfg.lam), cfg.k)
    init_position = pos.filled(0.0)
    init_color = rgb.values.copy()
    return FrameInputs(
        img_patches=image_patches(images, cameras, cfg.p_img),
        uv_patches=uv_patches(init_position, init_color, pos.valid, cfg.p_uv, cfg.uv_position_unit),
        flat_idx=table.flat,
        init_position=init_position,
        init_color=init_color,
        valid=pos.valid.copy(),
        extras={"table": table, "color_valid": rgb.valid},
    )


def make_sample(coarse, images, cameras, gt: GaussianTexture, cfg: ModelConfig, frame: int = 0, draw: int = 0) -> Sample:
    return Sample(prepare_inputs(coarse, images, cameras, cfg), gt.position.copy(), gt.valid.copy(), frame, draw)


def _first_nonfinite(named: dict) -> str | None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


def loss_and_grads(params: dict, cfg: ModelConfig, sample: Sample, weights: LossWeights):
    """Total geometry-stage loss, its parts and the parameter gradients."""
    fwd = forward(params, cfg, sample.inputs)
    f = fwd.fields
    l_geo, dpos = loss_geometry(f["position"], sample.target_position, sample.target_valid)
    l_reg, dscale, dop = loss_reg(f["scale"], f["opacity"], sample.inputs.valid)
    total = weights.w_geometry * l_geo + weights.w_reg * l_reg
    if not math.isfinite(total):
        bad = _first_nonfinite({"raw": fwd.raw, **f})
        raise NonFiniteError(f"non-finite loss (first non-finite tensor: {bad or 'loss'})")
    dfields = {
        "position": weights.w_geometry * dpos,
        "scale": weights.w_reg * dscale,
        "opacity": weights.w_reg * dop,
    }
    grads = backward(params, cfg, fwd, dfields)
    bad = _first_nonfinite({f"grad[{k}]": v for k, v in grads.items()})
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}")
    return total, {"geometry": l_geo, "reg": l_reg}, grads


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample visiting order of one epoch; a pure function of (seed, epoch)."""
    return Xoshiro256(seed, 0x7EA1, epoch).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    out = []
    for j in range(batch_size):
        pos = step * batch_size + j
        epoch, i = divmod(pos, n)
        out.append(int(epoch_order(seed, epoch, n)[i]))
    return out


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    geometry: float
    reg: float
    seconds: float


@dataclass
class TrainState:
    params: dict
    opt: Adam
    step: int = 0
    log: list = field(default_factory=list)


def head_lr_scale(cfg: ModelConfig, position_scale: float) -> dict:
    """Per-element lr multipliers that slow the position columns of the head."""
    if position_scale == 1.0:
        return {}
    cols = np.ones(cfg.p_uv**2 * CHANNELS)
    cols[np.isin(np.arange(len(cols)) % CHANNELS, np.arange(POSITION.start, POSITION.stop))] = position_scale
    return {"head.w": np.broadcast_to(cols, (cfg.d, len(cols))), "head.b": cols}


def make_optimizer(cfg: ModelConfig, tcfg: TrainConfig, params: dict) -> Adam:
    return Adam(params, lr=tcfg.lr, lr_scale=head_lr_scale(cfg, tcfg.position_lr_scale))


def new_state(cfg: ModelConfig, tcfg: TrainConfig, params: dict) -> TrainState:
    params = {k: round_f32(v) for k, v in params.items()}
    return TrainState(params, make_optimizer(cfg, tcfg, params), 0, [])


def train(state: TrainState, cfg: ModelConfig, tcfg: TrainConfig, samples: list[Sample],
          until: int | None = None, on_log=None, on_checkpoint=None) -> TrainState:
    """Run Adam steps from ``state.step`` up to ``until`` (default: all iterations)."""
    until = tcfg.iterations if until is None else min(until, tcfg.iterations)
    weights = tcfg.weights
    t0 = time.perf_counter()
    while state.step < until:
        step = state.step
        idx = batch_indices(tcfg.seed, step, tcfg.batch_size, len(samples))
        total = geo = reg = 0.0
        acc = None
        for i in idx:
            l, parts, g = loss_and_grads(state.params, cfg, samples[i], weights)
            total += l / len(idx)
            geo += parts["geometry"] / len(idx)
            reg += parts["reg"] / len(idx)
            if acc is None:
                acc = {k: v / len(idx) for k, v in g.items()}
            else:
                for k in acc:
                    acc[k] += g[k] / len(idx)
        if tcfg.loss_scale != 1.0:
            acc = {k: v * tcfg.loss_scale for k, v in acc.items()}
        state.opt.lr = tcfg.lr_at(step)
        state.opt.step(state.params, acc)
        state.step += 1
        if step % tcfg.log_every == 0 or state.step == until:
            row = LogRow(step, state.opt.lr, total, geo, reg, time.perf_counter() - t0)
            state.log.append(row)
            if on_log:
                on_log(row)
        if on_checkpoint and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def infer(params: dict, cfg: ModelConfig, inputs: FrameInputs) -> GaussianTexture:
    f = forward(params, cfg, inputs).fields
    return GaussianTexture(f["color"], f["opacity"], f["position"], f["scale"], f["rotation"], inputs.valid.copy())


def evaluate_geometry_loss(params: dict, cfg: ModelConfig, samples: list[Sample]) -> float:
    """Mean geometry loss over samples."""
    vals = []
    for s in samples:
        f = forward(params, cfg, s.inputs).fields
        vals.append(loss_geometry(f["position"], s.target_position, s.target_valid)[0])
    return float(np.mean(vals))
