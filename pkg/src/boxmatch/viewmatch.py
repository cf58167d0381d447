"""View-level matching: collapse the multi-view image features along height,
cross-attend from the 3D proposal queries, classify each proposal into one of
the camera views (or "no view"), and keep the top-K candidates."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import ParamStore, Tensor


@dataclass
class ViewAssignment:
    """Ordered candidate views for one 3D proposal.

    When the "no view" class ranks first the proposal skips fusion (pure
    LiDAR path); the remaining ranked views are kept as fallback candidates.
    """

    views: list[int]
    no_view: bool


def init_params(store: ParamStore, c: int, n_views: int,
                rng: np.random.Generator) -> None:
    dn.init_mlp(store, "view.posmlp", [3, c, c], rng)
    for nm in ("wq", "wk", "wv"):
        dn.init_matrix(store, f"view.attn.{nm}", c, c, rng)
    bound = 1.0 / math.sqrt(c)
    store.add("view.view_emb", rng.uniform(-bound, bound, (n_views, c)))
    dn.init_mlp(store, "view.clsmlp", [3 * c, c, n_views + 1], rng)


def collapse_height(fmap: np.ndarray) -> np.ndarray:
    """Mean over the height axis of an (n_views, h, w, c) feature map."""
    return fmap.mean(axis=1)


@functools.lru_cache(maxsize=None)
def _column_encoding(w: int, c: int) -> np.ndarray:
    enc = np.zeros((w, c))
    cols = np.arange(w)[:, None]
    half = c // 2
    i = np.arange(half)[None, :]
    freq = 1.0 / (100.0 ** (i / max(half, 1)))
    enc[:, :half] = np.sin(cols * freq)
    enc[:, half:2 * half] = np.cos(cols * freq)
    return enc


def view_cross_attention(f3d: Tensor, collapsed: np.ndarray, store: ParamStore,
                         n_heads: int = 1) -> Tensor:
    """Queries are the 3D proposal features; keys/values the flattened
    collapsed columns, keys offset by a learned per-view embedding plus a
    fixed sinusoidal column code."""
    n_views, w, c = collapsed.shape
    if f3d.shape[-1] != c:
        raise dn.ShapeError("proposal feature dim must match image channels")
    flat = collapsed.reshape(n_views * w, c)
    key_base = dn.tensor(flat + np.tile(_column_encoding(w, c), (n_views, 1)))
    view_rows = dn.gather_rows(store["view.view_emb"], np.repeat(np.arange(n_views), w))
    keys_in = dn.add(key_base, view_rows)
    q = dn.matmul(f3d, store["view.attn.wq"])
    k = dn.matmul(keys_in, store["view.attn.wk"])
    v = dn.matmul(dn.tensor(flat), store["view.attn.wv"])
    return dn.attention(q, k, v, None, n_heads)


def normalize_centers(centers: np.ndarray, extent: float) -> np.ndarray:
    """Map world coordinates into [-1, 1] by the world extent."""
    return np.asarray(centers, dtype=np.float64) / extent


def pos_embed_3d(centers: np.ndarray, extent: float, store: ParamStore) -> Tensor:
    x = dn.tensor(normalize_centers(centers, extent))
    return dn.mlp(x, dn.mlp_layers(store, "view.posmlp"))


def classify_views(f_ca: Tensor, f3d: Tensor, f_pos: Tensor,
                   store: ParamStore) -> Tensor:
    if not (f_ca.shape[0] == f3d.shape[0] == f_pos.shape[0]):
        raise dn.ShapeError("row counts of classifier inputs must agree")
    x = dn.concat([f_ca, f3d, f_pos], axis=-1)
    return dn.mlp(x, dn.mlp_layers(store, "view.clsmlp"))


def select_topk(view_logits: np.ndarray, k: int) -> list[ViewAssignment]:
    """Per row: the K highest-logit classes, ties to the lower index; the
    "no view" class (last column) is flagged when it ranks first and dropped
    from the kept view list."""
    n_classes = view_logits.shape[1]
    no_view_class = n_classes - 1
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_classes:
        raise ValueError(f"k={k} exceeds the {n_classes} view classes")
    out = []
    for row in view_logits:
        order = np.argsort(-row, kind="stable")[:k]
        no_view = bool(order[0] == no_view_class)
        views = [int(c) for c in order if c != no_view_class]
        out.append(ViewAssignment(views=views, no_view=no_view))
    return out


def topk_hits(view_logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: true label among the K highest-logit classes."""
    order = np.argsort(-view_logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)
