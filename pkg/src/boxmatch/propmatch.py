"""Proposal-level matching: ROI/class/position embeddings for both
modalities, the scaled dot-product matching matrix with a null column for
"no 2D counterpart", thresholded pair extraction, and the cross-view merge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import ParamStore, Tensor


@dataclass
class RowMatch:
    """Match decision for one matrix row: column index (None when the null
    column wins or the score is below threshold) and its softmax score."""

    col: int | None
    score: float


@dataclass
class MatchResult:
    proposal: int
    view: int | None
    box2d_index: int | None  # local index within the view's 2D list
    score: float | None

    def to_dict(self) -> dict:
        return {"proposal": self.proposal, "view": self.view,
                "box2d_index": self.box2d_index, "score": self.score}


def init_params(store: ParamStore, c: int, n_classes: int,
                rng: np.random.Generator) -> None:
    dn.init_mlp(store, "prop2d.roimlp", [c, c, c], rng)
    dn.init_mlp(store, "prop2d.clsmlp", [n_classes, c, c], rng)
    dn.init_mlp(store, "prop2d.posmlp", [4, c, c], rng)
    dn.init_mlp(store, "prop2d.commlp", [3 * c, c, c], rng)
    dn.init_mlp(store, "prop3d.clsmlp", [n_classes, c, c], rng)
    dn.init_mlp(store, "prop3d.posmlp", [3, c, c], rng)
    dn.init_mlp(store, "prop3d.commlp", [3 * c, c, c], rng)


# ---------------------------------------------------------------------------
# ROI pooling

def bilinear_sample(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear interpolation at grid coordinates (x, y); cell (r, c) has its
    center at (c + 0.5, r + 0.5); border samples clamp."""
    h, w = fmap.shape[0], fmap.shape[1]
    u = x - 0.5
    v = y - 0.5
    j0 = math.floor(u)
    i0 = math.floor(v)
    fu = u - j0
    fv = v - i0
    j0c = min(max(j0, 0), w - 1)
    j1c = min(max(j0 + 1, 0), w - 1)
    i0c = min(max(i0, 0), h - 1)
    i1c = min(max(i0 + 1, 0), h - 1)
    return ((1 - fv) * (1 - fu) * fmap[i0c, j0c] + (1 - fv) * fu * fmap[i0c, j1c]
            + fv * (1 - fu) * fmap[i1c, j0c] + fv * fu * fmap[i1c, j1c])


def roi_pool_batch(fmap: np.ndarray, boxes: np.ndarray, grid: int = 7) -> np.ndarray:
    """Mean of grid x grid bilinear samples inside each feature-grid box,
    vectorized over boxes; degenerate boxes pool to the zero vector."""
    c = fmap.shape[-1]
    n = len(boxes)
    if n == 0:
        return np.zeros((0, c))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(n, 4)
    h, w = fmap.shape[0], fmap.shape[1]
    offs = (np.arange(grid) + 0.5) / grid
    xs = boxes[:, 0:1] + offs[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    ys = boxes[:, 1:2] + offs[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    u = xs[:, None, :] - 0.5          # (n, 1, grid)
    v = ys[:, :, None] - 0.5          # (n, grid, 1)
    j0 = np.floor(u).astype(int)
    i0 = np.floor(v).astype(int)
    fu = u - j0
    fv = v - i0
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j0 + 1, 0, w - 1)
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i0 + 1, 0, h - 1)
    fu = fu[..., None]
    fv = fv[..., None]
    val = ((1 - fv) * (1 - fu) * fmap[i0c, j0c]
           + (1 - fv) * fu * fmap[i0c, j1c]
           + fv * (1 - fu) * fmap[i1c, j0c]
           + fv * fu * fmap[i1c, j1c])
    pooled = val.mean(axis=(1, 2))
    degenerate = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if degenerate.any():
        pooled[degenerate] = 0.0
    return pooled


def roi_pool_grid(fmap: np.ndarray, box: np.ndarray, grid: int = 7) -> np.ndarray:
    """Single-box variant of roi_pool_batch."""
    return roi_pool_batch(fmap, np.asarray(box).reshape(1, 4), grid)[0]


def roi_pool_2d(fmap: np.ndarray, boxes_grid: np.ndarray, store: ParamStore,
                grid: int = 7) -> Tensor:
    """Pool every feature-grid box to a channel vector and project by the
    ROI MLP; rows align with the boxes."""
    pooled = roi_pool_batch(fmap, boxes_grid, grid)
    return dn.mlp(dn.tensor(pooled), dn.mlp_layers(store, "prop2d.roimlp"))


# ---------------------------------------------------------------------------
# embeddings

def _one_hot(ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(ids), n))
    if len(ids):
        out[np.arange(len(ids)), ids] = 1.0
    return out


def embed_2d(rois: Tensor, class_ids: np.ndarray, boxes: np.ndarray,
             img_w: int, img_h: int, n_classes: int, store: ParamStore) -> Tensor:
    n = rois.shape[0]
    if len(class_ids) != n or len(boxes) != n:
        raise dn.ShapeError("2D embedding inputs must be row-aligned")
    if n and (class_ids.min() < 0 or class_ids.max() >= n_classes):
        raise ValueError("unknown 2D class id")
    cls = dn.mlp(dn.tensor(_one_hot(class_ids, n_classes)),
                 dn.mlp_layers(store, "prop2d.clsmlp"))
    norm = np.asarray(boxes, dtype=np.float64).reshape(n, 4) / np.array(
        [img_w, img_h, img_w, img_h], dtype=np.float64)
    pos = dn.mlp(dn.tensor(norm), dn.mlp_layers(store, "prop2d.posmlp"))
    x = dn.concat([rois, cls, pos], axis=-1)
    return dn.mlp(x, dn.mlp_layers(store, "prop2d.commlp"))


def embed_3d(features: Tensor, class_ids: np.ndarray, centers: np.ndarray,
             extent: float, n_classes: int, store: ParamStore) -> Tensor:
    n = features.shape[0]
    if len(class_ids) != n or len(centers) != n:
        raise dn.ShapeError("3D embedding inputs must be row-aligned")
    if n and (class_ids.min() < 0 or class_ids.max() >= n_classes):
        raise ValueError("unknown 3D class id")
    cls = dn.mlp(dn.tensor(_one_hot(class_ids, n_classes)),
                 dn.mlp_layers(store, "prop3d.clsmlp"))
    norm = np.asarray(centers, dtype=np.float64).reshape(n, 3) / extent
    pos = dn.mlp(dn.tensor(norm), dn.mlp_layers(store, "prop3d.posmlp"))
    x = dn.concat([features, cls, pos], axis=-1)
    return dn.mlp(x, dn.mlp_layers(store, "prop3d.commlp"))


# ---------------------------------------------------------------------------
# matching

def matching_matrix(e3: Tensor, e2: Tensor | None) -> Tensor:
    """Scaled dot products of 3D embeddings against the 2D embeddings plus an
    appended all-zero row, so the last column scores "unmatched"."""
    c = e3.shape[-1]
    zero_row = dn.tensor(np.zeros((1, c)))
    if e2 is None or e2.shape[0] == 0:
        e2bar = zero_row
    else:
        if e2.shape[-1] != c:
            raise dn.ShapeError("embedding channel dims must agree")
        e2bar = dn.concat([e2, zero_row], axis=0)
    return dn.scale(dn.matmul(e3, dn.transpose(e2bar)), 1.0 / math.sqrt(c))


def extract_pairs(mp: np.ndarray, threshold: float = 0.1) -> list[RowMatch]:
    """Row-wise softmax over the columns; a row matches its argmax column
    when that is not the null column and its probability clears the
    threshold. Ties break to the lower index."""
    out = []
    null_col = mp.shape[1] - 1
    for row in mp:
        shifted = row - row.max()
        e = np.exp(shifted)
        p = e / e.sum()
        j = int(np.argmax(p))
        score = float(p[j])
        if j == null_col or score < threshold:
            out.append(RowMatch(col=None, score=score))
        else:
            out.append(RowMatch(col=j, score=score))
    return out


def merge_across_views(candidates: list[tuple[int, RowMatch]]
                       ) -> tuple[int, int, float] | None:
    """Keep the single highest-score match across a proposal's candidate
    views; None when every candidate is unmatched. Ties keep the earlier
    candidate view."""
    best = None
    for view, rm in candidates:
        if rm.col is None:
            continue
        if best is None or rm.score > best[2]:
            best = (view, rm.col, rm.score)
    return best
