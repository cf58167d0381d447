"""End-to-end assembly: parameter construction and the full forward pass from
branch outputs to matches and refined predictions. Calibration is never an
input here; association comes only from learned matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from . import fusionhead, propmatch, viewmatch
from .config import TrainConfig
from .diffnum import ParamStore, Tensor
from .propmatch import MatchResult, RowMatch
from .viewmatch import ViewAssignment
from .worldsim import (Proposal2D, Proposal3D, ViewFeatureMap, _grid_box,
                       group_by_view)


def init_model(cfg: TrainConfig) -> ParamStore:
    cfg.validate()
    store = ParamStore()
    rng = np.random.default_rng((cfg.seed, 7))
    c = cfg.sim.feat_dim
    viewmatch.init_params(store, c, cfg.scene.n_views, rng)
    propmatch.init_params(store, c, cfg.scene.n_classes, rng)
    fusionhead.init_params(store, c, cfg.scene.n_classes, rng)
    return store


@dataclass
class PipelineOutput:
    """Everything the losses, metrics, and dumps need from one scene pass."""

    view_logits: Tensor | None
    assignments: list[ViewAssignment]
    match_logits: list[Tensor | None]  # per view: (n3d, n2d_in_view + 1)
    row_matches: list[list[RowMatch] | None]  # per view
    matches: list[MatchResult]
    class_logits: Tensor | None
    box_deltas: Tensor | None
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    view_groups: list[list[int]] = field(default_factory=list)


def _empty_output(n_views: int) -> PipelineOutput:
    return PipelineOutput(view_logits=None, assignments=[],
                          match_logits=[None] * n_views,
                          row_matches=[None] * n_views, matches=[],
                          class_logits=None, box_deltas=None,
                          view_groups=[[] for _ in range(n_views)])


def run_pipeline(store: ParamStore, cfg: TrainConfig,
                 proposals3d: list[Proposal3D], bev: np.ndarray,
                 fmap: ViewFeatureMap, proposals2d: list[Proposal2D],
                 topk: int | None = None, one_level: bool = False
                 ) -> PipelineOutput:
    """Forward pass: view classification and top-K routing, per-view matching
    matrices, thresholded extraction merged across candidate views, then the
    three-branch fusion producing refined predictions.

    `one_level` bypasses view routing and matches against every view.
    """
    scene_cfg, sim = cfg.scene, cfg.sim
    n_views = scene_cfg.n_views
    k = cfg.topk if topk is None else topk
    n3 = len(proposals3d)
    if n3 == 0:
        return _empty_output(n_views)

    feats = np.stack([p.feature for p in proposals3d])
    centers = np.stack([p.center for p in proposals3d])
    cls3d = np.array([int(np.argmax(p.class_logits)) for p in proposals3d])
    f3d = dn.tensor(feats)

    # view-level matching
    collapsed = viewmatch.collapse_height(fmap.data)
    f_ca = viewmatch.view_cross_attention(f3d, collapsed, store, cfg.n_heads)
    f_pos = viewmatch.pos_embed_3d(centers, scene_cfg.world_extent, store)
    view_logits = viewmatch.classify_views(f_ca, f3d, f_pos, store)
    assignments = viewmatch.select_topk(view_logits.data, k)

    # proposal-level matching, one matrix per view; all views' 2D proposals
    # are pooled and embedded in a single pass, then sliced back per view
    groups = group_by_view(proposals2d, n_views)
    e3 = propmatch.embed_3d(f3d, cls3d, centers, scene_cfg.world_extent,
                            scene_cfg.n_classes, store)
    starts = np.cumsum([0] + [len(g) for g in groups])
    flat = [j for g in groups for j in g]
    roi2d_by_view: list[Tensor | None] = [None] * n_views
    match_logits: list[Tensor | None] = [None] * n_views
    row_matches: list[list[RowMatch] | None] = [None] * n_views
    e2_by_view: list[Tensor | None] = [None] * n_views
    if flat:
        boxes_all = np.stack([proposals2d[j].box for j in flat])
        cls_all = np.array([proposals2d[j].class_id for j in flat])
        scale = np.array([sim.fmap_w / scene_cfg.img_w,
                          sim.fmap_h / scene_cfg.img_h,
                          sim.fmap_w / scene_cfg.img_w,
                          sim.fmap_h / scene_cfg.img_h])
        grid_all = boxes_all * scale
        pooled = np.concatenate([
            propmatch.roi_pool_batch(fmap.data[v],
                                     grid_all[starts[v]:starts[v + 1]])
            for v in range(n_views)])
        rois_all = dn.mlp(dn.tensor(pooled), dn.mlp_layers(store, "prop2d.roimlp"))
        e2_all = propmatch.embed_2d(rois_all, cls_all, boxes_all, scene_cfg.img_w,
                                    scene_cfg.img_h, scene_cfg.n_classes, store)
        for v in range(n_views):
            n_v = starts[v + 1] - starts[v]
            if n_v:
                roi2d_by_view[v] = dn.narrow(rois_all, 0, int(starts[v]), int(n_v))
                e2_by_view[v] = dn.narrow(e2_all, 0, int(starts[v]), int(n_v))
    for v in range(n_views):
        mp = propmatch.matching_matrix(e3, e2_by_view[v])
        match_logits[v] = mp
        row_matches[v] = propmatch.extract_pairs(mp.data, cfg.match_threshold)

    # merge candidates across each proposal's candidate views
    matches: list[MatchResult] = []
    prob_by_view = [dn.softmax(mp, axis=-1) if mp is not None else None
                    for mp in match_logits]
    for i in range(n3):
        if one_level:
            cand_views = list(range(n_views))
        else:
            cand_views = [] if assignments[i].no_view else assignments[i].views
        candidates = [(v, row_matches[v][i]) for v in cand_views]
        best = propmatch.merge_across_views(candidates)
        if best is None:
            matches.append(MatchResult(proposal=i, view=None, box2d_index=None,
                                       score=None))
        else:
            matches.append(MatchResult(proposal=i, view=best[0],
                                       box2d_index=best[1], score=best[2]))

    # fusion inputs
    matched_rows: dict[int, list[int]] = {}
    matched_cols: dict[int, list[int]] = {}
    pixel_sets = np.zeros((n3, sim.fmap_h * sim.fmap_w, sim.feat_dim))
    mask_boxes: list[np.ndarray | None] = [None] * n3
    for m in matches:
        if m.view is None:
            continue
        matched_rows.setdefault(m.view, []).append(m.proposal)
        matched_cols.setdefault(m.view, []).append(m.box2d_index)
        pixel_sets[m.proposal] = fmap.data[m.view].reshape(-1, sim.feat_dim)
        j = groups[m.view][m.box2d_index]
        mask_boxes[m.proposal] = _grid_box(proposals2d[j].box, scene_cfg.img_w,
                                           scene_cfg.img_h, sim.fmap_w, sim.fmap_h)

    # matched 2D ROI rows gathered per view, zero rows where unmatched
    roi_parts = []
    score_parts = []
    for v, rows in matched_rows.items():
        cols = np.array(matched_cols[v])
        rows_a = np.array(rows)
        roi_parts.append(dn.put_rows(n3, rows_a, dn.gather_rows(roi2d_by_view[v], cols)))
        score_parts.append(dn.put_rows(
            n3, rows_a, dn.gather_entries(prob_by_view[v], rows_a, cols)))
    if roi_parts:
        roi2d = roi_parts[0]
        s_vec = score_parts[0]
        for extra, s_extra in zip(roi_parts[1:], score_parts[1:]):
            roi2d = dn.add(roi2d, extra)
            s_vec = dn.add(s_vec, s_extra)
    else:
        roi2d = dn.tensor(np.zeros((n3, sim.feat_dim)))
        s_vec = dn.tensor(np.zeros(n3))
    s_col = dn.reshape(s_vec, (n3, 1))

    mask = fusionhead.build_roi_mask(sim.fmap_h, sim.fmap_w, mask_boxes)
    o1 = fusionhead.query_pixel_fusion(f3d, pixel_sets, mask, store, cfg.n_heads)
    o2 = fusionhead.query_roi_fusion(f3d, roi2d, s_col, store)
    roi3d = fusionhead.roi3d_pool(bev, [(p.center, p.size, p.yaw)
                                        for p in proposals3d],
                                  scene_cfg.world_extent, store)
    o3 = fusionhead.roi_roi_fusion(roi3d, roi2d, store, cfg.n_heads)
    class_logits, box_deltas = fusionhead.fuse_predict(o1, o2, o3, store,
                                                       scene_cfg.n_classes)
    return PipelineOutput(view_logits=view_logits, assignments=assignments,
                          match_logits=match_logits, row_matches=row_matches,
                          matches=matches, class_logits=class_logits,
                          box_deltas=box_deltas, scores=s_vec.data.copy(),
                          view_groups=groups)
