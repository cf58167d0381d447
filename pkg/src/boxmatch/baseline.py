"""Projection-based matcher: associates 3D and 2D proposals by projecting 3D
boxes with the provided (possibly stale or perturbed) calibration and gating
on pixel IoU. This is the contrast class — unlike the learned pipeline it
consumes the rig at inference time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .worldsim import (CameraModel, DisturbanceSpec, Proposal2D, Proposal3D,
                       Scene, apply_misalignment, group_by_view,
                       perturb_calibration, project_box,
                       simulate_camera_branch, simulate_lidar_branch)

IOU_GATE = 0.3


@dataclass
class BaselineMatch:
    proposal: int
    view: int | None
    box2d_index: int | None  # flat index into the 2D proposal list
    iou: float | None

    def to_dict(self) -> dict:
        return {"proposal": self.proposal, "view": self.view,
                "box2d_index": self.box2d_index, "score": self.iou}


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union if union > 0 else 0.0


def baseline_match(proposals3d: list[Proposal3D], proposals2d: list[Proposal2D],
                   rig: list[CameraModel], iou_gate: float = IOU_GATE
                   ) -> list[BaselineMatch]:
    """Greedy per-proposal max-IoU association between the projected 3D box
    rectangle and the 2D boxes of every view the center projects into."""
    groups = group_by_view(proposals2d, len(rig))
    out = []
    for i, p in enumerate(proposals3d):
        best_view = None
        best_j = None
        best_iou = iou_gate
        for v, cam in enumerate(rig):
            box = project_box(cam, p.center, p.size, p.yaw)
            if box is None:
                continue
            for j in groups[v]:
                iou = _iou(box, proposals2d[j].box)
                if iou > best_iou:
                    best_view, best_j, best_iou = v, j, iou
        if best_j is None:
            out.append(BaselineMatch(proposal=i, view=None, box2d_index=None,
                                     iou=None))
        else:
            out.append(BaselineMatch(proposal=i, view=best_view,
                                     box2d_index=best_j, iou=best_iou))
    return out


def evaluate_baseline(cfg: TrainConfig, scenes: list[Scene],
                      disturb: DisturbanceSpec) -> dict:
    """Match quality of the projection matcher under a disturbance; it sees
    the same simulated branch outputs as the learned pipeline but also the
    rig, stale against misalignment and possibly calibration-perturbed."""
    from .trainloop import match_counts, prf

    tp = fp = gt_pairs = 0
    n_props = 0
    for scene in scenes:
        p3d, bev = simulate_lidar_branch(scene, cfg.scene, cfg.sim,
                                         seed=scene.seed)
        if disturb.misalign_rot_deg != 0.0 or disturb.misalign_trans_m != 0.0:
            p3d, bev = apply_misalignment(p3d, bev, disturb.misalign_rot_deg,
                                          disturb.misalign_trans_m,
                                          cfg.scene.world_extent,
                                          seed=scene.seed)
        _, p2d = simulate_camera_branch(scene, disturb, cfg.scene, cfg.sim,
                                        seed=scene.seed)
        rig = scene.rig
        if disturb.calib_trans_range_m > 0 or disturb.calib_rot_range_deg > 0:
            rig = perturb_calibration(rig, disturb.calib_trans_range_m,
                                      disturb.calib_rot_range_deg,
                                      seed=scene.seed)
        matches = baseline_match(p3d, p2d, rig)
        pred = [(m.proposal, m.box2d_index) for m in matches]
        s_tp, s_fp, s_gt = match_counts(p3d, p2d, pred)
        tp += s_tp
        fp += s_fp
        gt_pairs += s_gt
        n_props += len(p3d)
    precision, recall, f1 = prf(tp, fp, gt_pairs)
    return {"n_scenes": len(scenes), "n_proposals": n_props,
            "match_precision": precision, "match_recall": recall,
            "match_f1": f1}
