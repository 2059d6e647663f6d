"""UV-token / image-token correspondence scores and the top-k attention table."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import RasterBuffer, TopologyMesh, rasterize

DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class TokenLayout:
    uv_grid: tuple[int, int]  # (H'_uv, W'_uv)
    p_uv: int
    img_grid: tuple[int, int]  # (H'_img, W'_img)
    p_img: int
    views: int

    def __post_init__(self):
        if self.p_uv < 1 or self.p_img < 1:
            raise ValueError("patch sizes must be >= 1")

    @classmethod
    def from_sizes(cls, uv_size: int, p_uv: int, img_hw: tuple[int, int], p_img: int, views: int):
        H, W = img_hw
        if uv_size % p_uv or H % p_img or W % p_img:
            raise ValueError("texture / image sizes must be divisible by the patch sizes")
        return cls((uv_size // p_uv, uv_size // p_uv), p_uv, (H // p_img, W // p_img), p_img, views)

    @property
    def n_uv(self) -> int:
        return self.uv_grid[0] * self.uv_grid[1]

    @property
    def n_img(self) -> int:
        """Image tokens per view."""
        return self.img_grid[0] * self.img_grid[1]

    @property
    def uv_size(self) -> tuple[int, int]:
        return self.uv_grid[0] * self.p_uv, self.uv_grid[1] * self.p_uv

    @property
    def img_size(self) -> tuple[int, int]:
        return self.img_grid[0] * self.p_img, self.img_grid[1] * self.p_img


@dataclass(frozen=True)
class PixelBox:
    """Half-open pixel rectangle rows [r0, r1) x cols [c0, c1)."""

    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def area(self) -> int:
        return max(self.r1 - self.r0, 0) * max(self.c1 - self.c0, 0)

    @property
    def empty(self) -> bool:
        return self.area == 0

    def union(self, other: "PixelBox") -> "PixelBox":
        if self.empty:
            return other
        if other.empty:
            return self
        return PixelBox(min(self.r0, other.r0), min(self.c0, other.c0),
                        max(self.r1, other.r1), max(self.c1, other.c1))


EMPTY_BOX = PixelBox(0, 0, 0, 0)


@dataclass
class RegionOfInterest:
    bitmap: np.ndarray  # (H, W) bool
    pixel_count: int
    bbox: PixelBox

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray) -> "RegionOfInterest":
        bitmap = np.asarray(bitmap, dtype=bool)
        rows, cols = np.nonzero(bitmap)
        if len(rows) == 0:
            return cls(bitmap, 0, EMPTY_BOX)
        box = PixelBox(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
        return cls(bitmap, int(len(rows)), box)


def uv_token_of(uv: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """UV-token raster index for each uv (-1 when nan or outside [0, 1))."""
    Hu, Wu = layout.uv_grid
    ok = np.all(np.isfinite(uv), axis=-1)
    safe = np.where(ok[..., None], uv, -1.0)
    tu = np.floor(safe[..., 0] * Wu).astype(np.int64)
    tv = np.floor(safe[..., 1] * Hu).astype(np.int64)
    inside = ok & (tu >= 0) & (tu < Wu) & (tv >= 0) & (tv < Hu)
    return np.where(inside, tv * Wu + tu, -1)


def compute_roi(uv_token: int, raster_buffers: list[RasterBuffer], layout: TokenLayout) -> list[RegionOfInterest]:
    """Per-view pixels whose rasterized uv falls into the token's uv rectangle."""
    return [RegionOfInterest.from_bitmap(uv_token_of(rb.uv, layout) == uv_token) for rb in raster_buffers]


def image_token_box(index: int, layout: TokenLayout) -> PixelBox:
    r, c = divmod(index, layout.img_grid[1])
    p = layout.p_img
    return PixelBox(r * p, c * p, (r + 1) * p, (c + 1) * p)


def correspondence_score(roi: RegionOfInterest, box: PixelBox, lam: float = DEFAULT_LAMBDA) -> float:
    """S = |RoI ∩ B| / |B| + lam * |RoI| / |bbox(RoI) ∪ B| in pixel counts."""
    if box.empty:
        raise ValueError("image token box must be non-empty")
    if roi.pixel_count == 0:
        return 0.0
    inter = int(roi.bitmap[max(box.r0, 0):max(box.r1, 0), max(box.c0, 0):max(box.c1, 0)].sum())
    enc = roi.bbox.union(box)
    return inter / box.area + lam * roi.pixel_count / enc.area


def score_matrix(raster_buffers: list[RasterBuffer], layout: TokenLayout, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """(n_uv, V, n_img) scores for every (UV token, view, image token) triple."""
    T, n_img = layout.n_uv, layout.n_img
    Hi, Wi = layout.img_grid
    p = layout.p_img
    jr, jc = np.divmod(np.arange(n_img), Wi)
    box_r0, box_c0 = jr * p, jc * p
    box_r1, box_c1 = box_r0 + p, box_c0 + p
    out = np.zeros((T, len(raster_buffers), n_img))
    for v, rb in enumerate(raster_buffers):
        H, W = rb.shape
        if (H, W) != layout.img_size:
            raise ValueError("raster buffer size does not match the token layout")
        tok = uv_token_of(rb.uv, layout)
        rows, cols = np.nonzero(tok >= 0)
        t = tok[rows, cols]
        j = (rows // p) * Wi + cols // p
        inter = np.bincount(t * n_img + j, minlength=T * n_img).reshape(T, n_img)
        count = np.bincount(t, minlength=T)
        r0 = np.full(T, np.iinfo(np.int64).max)
        c0 = np.full(T, np.iinfo(np.int64).max)
        r1 = np.full(T, -1)
        c1 = np.full(T, -1)
        np.minimum.at(r0, t, rows)
        np.minimum.at(c0, t, cols)
        np.maximum.at(r1, t, rows + 1)
        np.maximum.at(c1, t, cols + 1)
        seen = count > 0
        er = np.maximum(r1[seen, None], box_r1[None]) - np.minimum(r0[seen, None], box_r0[None])
        ec = np.maximum(c1[seen, None], box_c1[None]) - np.minimum(c0[seen, None], box_c0[None])
        out[seen, v] = inter[seen] / float(p * p) + lam * count[seen, None] / (er * ec)
    return out


@dataclass
class CorrespondenceTable:
    view: np.ndarray  # (n_uv, k) int
    token: np.ndarray  # (n_uv, k) int, raster index within the view
    score: np.ndarray  # (n_uv, k) descending per row
    unobserved: np.ndarray  # (n_uv,) bool
    n_img: int  # image tokens per view

    @property
    def k(self) -> int:
        return self.view.shape[1]

    @property
    def n_uv(self) -> int:
        return self.view.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Global image-token index ``view * n_img + token``."""
        return self.view * self.n_img + self.token

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["uv_token", "rank", "view", "img_token", "score"])
            for t in range(self.n_uv):
                for r in range(self.k):
                    w.writerow([t, r, int(self.view[t, r]), int(self.token[t, r]), repr(float(self.score[t, r]))])


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best entries of each row of ``scores`` (rows are flattened
    (view, token) in raster order). Ties go to the lower flat index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.atleast_2d(scores)
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def table_from_scores(scores: np.ndarray, k: int) -> CorrespondenceTable:
    T, V, n_img = scores.shape
    flat = scores.reshape(T, V * n_img)
    idx = select_topk(flat, k)
    view, token = np.divmod(idx, n_img)
    sc = np.take_along_axis(flat, idx, axis=1)
    unobserved = ~np.any(flat > 0.0, axis=1)
    return CorrespondenceTable(view, token, sc, unobserved, n_img)


def build_table(mesh: TopologyMesh, cameras, layout: TokenLayout, k: int,
                lam: float = DEFAULT_LAMBDA, raster_buffers: list[RasterBuffer] | None = None) -> CorrespondenceTable:
    if raster_buffers is None:
        raster_buffers = [rasterize(mesh, c.pose, c.K) for c in cameras]
    return table_from_scores(score_matrix(raster_buffers, layout, lam), k)


def read_table_csv(path, n_img: int) -> CorrespondenceTable:
    rows = list(csv.DictReader(open(path)))
    T = max(int(r["uv_token"]) for r in rows) + 1
    k = max(int(r["rank"]) for r in rows) + 1
    view = np.zeros((T, k), dtype=np.int64)
    token = np.zeros((T, k), dtype=np.int64)
    score = np.zeros((T, k))
    for r in rows:
        t, i = int(r["uv_token"]), int(r["rank"])
        view[t, i], token[t, i], score[t, i] = int(r["view"]), int(r["img_token"]), float(r["score"])
    return CorrespondenceTable(view, token, score, ~np.any(score > 0, axis=1), n_img)
