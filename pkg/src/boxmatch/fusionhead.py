"""Matching-based fusion: query-pixel decoding masked to the matched ROI,
score-reweighted query-ROI fusion, BEV ROI pooling, ROI-ROI decoding, and the
final prediction head."""

from __future__ import annotations

import numpy as np

from . import diffnum as dn
from .diffnum import ParamStore, Tensor
from .worldsim import footprint_mask, _bev_cell_centers


def init_params(store: ParamStore, c: int, n_classes: int,
                rng: np.random.Generator) -> None:
    dn.init_decoder_params(store, "fus.o1", c, 2 * c, rng)
    dn.init_mlp(store, "fus.o2.mlp", [2 * c, c, c], rng)
    dn.init_decoder_params(store, "fus.o3", c, 2 * c, rng)
    dn.init_mlp(store, "fus.roi3dmlp", [c, c, c], rng)
    dn.init_mlp(store, "fus.head", [3 * c, c, n_classes + 7], rng)


def build_roi_mask(fmap_h: int, fmap_w: int,
                   boxes_grid: list[np.ndarray | None]) -> np.ndarray:
    """Attention mask over flattened (h*w) pixels per proposal: 0 for cells
    whose centers fall inside the matched feature-grid box, the ignore value
    outside; an unmatched proposal (None box) masks every cell."""
    col_centers = np.arange(fmap_w) + 0.5
    row_centers = np.arange(fmap_h) + 0.5
    mask = np.full((len(boxes_grid), fmap_h * fmap_w), dn.MASK_IGNORE_VALUE)
    for i, box in enumerate(boxes_grid):
        if box is None:
            continue
        inside = ((row_centers[:, None] >= box[1]) & (row_centers[:, None] <= box[3])
                  & (col_centers[None, :] >= box[0]) & (col_centers[None, :] <= box[2]))
        mask[i] = np.where(inside.reshape(-1), 0.0, dn.MASK_IGNORE_VALUE)
    return mask


def query_pixel_fusion(f3d: Tensor, pixels: np.ndarray, mask: np.ndarray,
                       store: ParamStore, n_heads: int = 1) -> Tensor:
    """Decoder over per-proposal matched-view pixels: queries are the 3D
    features, keys/values the (n, h*w, c) flattened pixels of each
    proposal's matched view."""
    if pixels.shape[0] != f3d.shape[0]:
        raise dn.ShapeError("per-proposal pixel sets must align with queries")
    kv = dn.tensor(pixels)
    return dn.decoder_block(f3d, kv, kv, mask, store, "fus.o1", n_heads)


def query_roi_fusion(f3d: Tensor, roi2d: Tensor, s: Tensor,
                     store: ParamStore) -> Tensor:
    """Concat of the 3D features with the score-reweighted matched 2D ROI
    features, reduced by an MLP; a zero ROI row contributes exactly nothing."""
    if roi2d.shape != f3d.shape:
        raise dn.ShapeError("ROI rows must align with 3D feature rows")
    weighted = dn.mul(roi2d, s)
    x = dn.concat([f3d, weighted], axis=-1)
    return dn.mlp(x, dn.mlp_layers(store, "fus.o2.mlp"))


def roi3d_pool_grid(bev: np.ndarray, center: np.ndarray, size: np.ndarray,
                    yaw: float, extent: float) -> np.ndarray:
    """Mean of BEV cells whose centers fall inside the box's rotated
    ground-plane footprint; zero vector when the footprint misses the grid."""
    h, w = bev.shape[0], bev.shape[1]
    xs, ys = _bev_cell_centers(extent, h, w)
    gx, gy = np.meshgrid(xs, ys)
    inside = footprint_mask(gx, gy, center, size, yaw)
    if not inside.any():
        return np.zeros(bev.shape[-1])
    return bev[inside].mean(axis=0)


def roi3d_pool(bev: np.ndarray, boxes: list[tuple[np.ndarray, np.ndarray, float]],
               extent: float, store: ParamStore) -> Tensor:
    c = bev.shape[-1]
    if not boxes:
        pooled = np.zeros((0, c))
    else:
        pooled = np.stack([roi3d_pool_grid(bev, ctr, sz, yaw, extent)
                           for ctr, sz, yaw in boxes])
    return dn.mlp(dn.tensor(pooled), dn.mlp_layers(store, "fus.roi3dmlp"))


def roi_roi_fusion(roi3d: Tensor, roi2d: Tensor, store: ParamStore,
                   n_heads: int = 1) -> Tensor:
    """Decoder with the 3D ROI features as queries and the matched 2D ROI
    rows as keys/values; no mask, attention spans every row."""
    if roi2d.shape != roi3d.shape:
        raise dn.ShapeError("ROI feature rows must align")
    return dn.decoder_block(roi3d, roi2d, roi2d, None, store, "fus.o3", n_heads)


def fuse_predict(o1: Tensor, o2: Tensor, o3: Tensor, store: ParamStore,
                 n_classes: int) -> tuple[Tensor, Tensor]:
    """Concat the three fused features and run the prediction head; returns
    (class logits, box deltas)."""
    if not (o1.shape == o2.shape == o3.shape):
        raise dn.ShapeError("fused feature shapes must agree")
    out = dn.mlp(dn.concat([o1, o2, o3], axis=-1), dn.mlp_layers(store, "fus.head"))
    logits = dn.narrow(out, -1, 0, n_classes)
    deltas = dn.narrow(out, -1, n_classes, 7)
    return logits, deltas
