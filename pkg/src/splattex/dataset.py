"""On-disk synthetic dataset: generation, manifest hashing and loading.

Layout::

    cameras.json                 {"cameras": [...], "heldout": [...]}
    manifest.json                generator config + sha256 of every file
    frame_0000/
        images/view_00.ppm ...
        gt_texture.bin           14-channel Gaussian texture
        coarse_mesh.obj          perturbed registration
        gt_mesh.obj              noise-free registration
        spec.json                identity / expression / noise record
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera, load_cameras, save_cameras
from .gaussians import GaussianTexture, load_gaussians, save_gaussians
from .mesh import TopologyMesh, read_obj, write_obj
from .renderer import read_ppm, to_uint8, write_ppm
from .synthdata import (ExpressionSpec, IdentitySpec, bake_gt_frame, gen_cameras, gen_identity,
                        perturb_mesh, weld_groups)


@dataclass
class DataConfig:
    seed: int = 0
    identities: int = 4
    expressions: int = 8
    views: int = 4
    heldout_views: int = 2
    image_size: tuple = (64, 64)
    uv_size: int = 64
    sigma_noise_mm: float = 3.0
    resolution: int = 32
    camera_radius: float = 0.6
    elevation: float = 0.0
    expression_amplitude: float = 0.01
    jaw_max: float = 0.25

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.identities < 1 or self.expressions < 1 or self.views < 1:
            raise ValueError("identities, expressions and views must be >= 1")
        if self.sigma_noise_mm < 0:
            raise ValueError("sigma_noise_mm must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.identities * self.expressions

    def identity_spec(self, i: int) -> IdentitySpec:
        return IdentitySpec(seed=self.seed * 1000 + i, resolution=self.resolution)

    def expression_spec(self, i: int, j: int) -> ExpressionSpec:
        # expression 0 of every identity is the neutral face
        if j == 0:
            return ExpressionSpec()
        return ExpressionSpec.random(self.seed * 1000 + i, j, self.expression_amplitude, self.jaw_max)

    def cameras(self) -> list[Camera]:
        return gen_cameras(self.views, self.camera_radius, self.elevation, self.image_size)

    def heldout_cameras(self) -> list[Camera]:
        """Cameras between the training ones (offset by half a spacing, slightly raised)."""
        if self.heldout_views == 0:
            return []
        span = 40.0 * (1.0 - 1.0 / max(self.views, 2))
        return gen_cameras(self.heldout_views, self.camera_radius, self.elevation + 10.0, self.image_size,
                           span_deg=span if self.heldout_views > 1 else 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def frame_dir(root, index: int) -> Path:
    return Path(root) / f"frame_{index:04d}"


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_dataset(root, cfg: DataConfig) -> dict:
    """Write the dataset and return the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cams = cfg.cameras()
    save_cameras(root / "cameras.json", cams, heldout=cfg.heldout_cameras())
    sigma = cfg.sigma_noise_mm * 1e-3
    for i in range(cfg.identities):
        ident = gen_identity(cfg.identity_spec(i))
        weld = weld_groups(ident.mesh.vertices)
        for j in range(cfg.expressions):
            index = i * cfg.expressions + j
            expr = cfg.expression_spec(i, j)
            fr = bake_gt_frame(ident, expr, cams, cfg.uv_size, sigma, cfg.seed, index, weld=weld)
            d = frame_dir(root, index)
            (d / "images").mkdir(parents=True, exist_ok=True)
            for v, img in enumerate(fr.images):
                write_ppm(d / "images" / f"view_{v:02d}.ppm", img)
            save_gaussians(d / "gt_texture.bin", fr.gt)
            write_obj(d / "coarse_mesh.obj", fr.coarse_mesh)
            write_obj(d / "gt_mesh.obj", fr.gt_mesh)
            spec = {"frame": index, "identity_index": i, "expression_index": j,
                    "identity": ident.spec.to_dict(), "expression": expr.to_dict(),
                    "sigma_noise_mm": cfg.sigma_noise_mm, "seed": cfg.seed}
            (d / "spec.json").write_text(json.dumps(spec, indent=2, sort_keys=True))
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"config": cfg.to_dict(), "n_frames": cfg.n_frames,
                "files": {str(p.relative_to(root)): sha256(p) for p in files}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class DataError(RuntimeError):
    pass


@dataclass
class FrameData:
    index: int
    images: list
    gt: GaussianTexture
    coarse_mesh: TopologyMesh
    gt_mesh: TopologyMesh
    spec: dict = field(default_factory=dict)


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(mpath.read_text())
        self.config = DataConfig(**self.manifest["config"])
        self.cameras = load_cameras(self.root / "cameras.json")
        self.heldout_cameras = load_cameras(self.root / "cameras.json", "heldout")

    def __len__(self) -> int:
        return self.manifest["n_frames"]

    def load(self, index: int) -> FrameData:
        d = frame_dir(self.root, index)
        if not d.exists():
            raise DataError(f"missing frame directory {d}")
        try:
            images = [read_ppm(d / "images" / f"view_{v:02d}.ppm") for v in range(len(self.cameras))]
            return FrameData(index, images, load_gaussians(d / "gt_texture.bin"), read_obj(d / "coarse_mesh.obj"),
                             read_obj(d / "gt_mesh.obj"), json.loads((d / "spec.json").read_text()))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read frame {index}: {exc}") from exc

    def verify(self) -> list[str]:
        """Relative paths whose content no longer matches the manifest."""
        return [rel for rel, h in self.manifest["files"].items()
                if not (self.root / rel).exists() or sha256(self.root / rel) != h]


def renoised_coarse(frame: FrameData, sigma_mm: float, seed: int, draw: int) -> TopologyMesh:
    """A fresh coarse registration of a frame: the noise-free mesh plus a new noise draw."""
    return perturb_mesh(frame.gt_mesh, sigma_mm * 1e-3, seed, frame.index,
                        weld_groups(frame.gt_mesh.vertices), draw=draw)


def quantize(img: np.ndarray) -> np.ndarray:
    """The 8-bit value an image takes after a PPM round trip."""
    return to_uint8(img).astype(np.float64) / 255.0
