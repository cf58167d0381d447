"""End-to-end training on synthetic scenes with the weighted matching +
detection loss, checkpoint persistence, and disturbance-aware evaluation.
Labels come from the true rig (or the id join); the inference path itself
never sees calibration."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

from . import diffnum as dn
from .config import TrainConfig, to_dict, train_config_from_dict
from .diffnum import ParamStore, Tensor
from .pipeline import PipelineOutput, init_model, run_pipeline
from .worldsim import (DisturbanceSpec, GroundTruth, Proposal2D, Proposal3D,
                       Scene, ViewFeatureMap, apply_misalignment,
                       box_corners_3d, make_gt_correspondences,
                       simulate_camera_branch, simulate_lidar_branch,
                       wrap_angle)

ASSIGN_RADIUS_M = 2.0


@dataclass
class EvalReport:
    """Desk-scale quality summary of one evaluation run."""

    n_scenes: int
    n_proposals: int
    view_top1_acc: float
    view_top2_acc: float
    match_precision: float
    match_recall: float
    match_f1: float
    no_view_rate: float
    bev_iou: float
    class_acc: float
    detection_score: float
    loss_total: float
    loss_det: float
    loss_view: float
    loss_pro: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))


# ---------------------------------------------------------------------------
# losses

@dataclass
class DetectionTargets:
    class_ids: np.ndarray
    deltas: np.ndarray
    assigned: np.ndarray  # bool per proposal; unassigned rows carry no loss


def detection_targets(scene: Scene, proposals3d: list[Proposal3D]) -> DetectionTargets:
    """Assign each proposal to the nearest object center within the gate;
    targets are plain geometry differences."""
    n = len(proposals3d)
    cls = np.zeros(n, dtype=np.intp)
    deltas = np.zeros((n, 7))
    assigned = np.zeros(n, dtype=bool)
    if not scene.objects:
        return DetectionTargets(cls, deltas, assigned)
    obj_centers = np.stack([o.center for o in scene.objects])
    for i, p in enumerate(proposals3d):
        d = np.linalg.norm(obj_centers - p.center, axis=1)
        j = int(np.argmin(d))
        if d[j] > ASSIGN_RADIUS_M:
            continue
        o = scene.objects[j]
        assigned[i] = True
        cls[i] = o.class_id
        deltas[i] = np.concatenate([o.center - p.center, o.size - p.size,
                                    [wrap_angle(o.yaw - p.yaw)]])
    return DetectionTargets(cls, deltas, assigned)


def total_loss(output: PipelineOutput, gt: GroundTruth, det: DetectionTargets,
               cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the detection loss and the two matching losses."""
    zero = dn.tensor(np.zeros(()))
    if output.view_logits is None:
        comps = {"total": 0.0, "det": 0.0, "view": 0.0, "pro": 0.0}
        return zero, comps

    l_view = dn.cross_entropy(output.view_logits, gt.view_labels)

    # supervise every view a proposal is visible in plus the ring neighbors
    # of its dominant view: those are exactly the rows top-K routing can
    # consult, and the neighbor rows must learn to answer "no counterpart"
    n_views = len(gt.match_matrices)
    members: list[set[int]] = [set() for _ in range(n_views)]
    for i, views in enumerate(gt.view_label_sets):
        for v in views:
            members[v].add(i)
        label = int(gt.view_labels[i])
        if label < n_views:
            members[(label - 1) % n_views].add(i)
            members[(label + 1) % n_views].add(i)
    pro_terms: list[tuple[Tensor, int]] = []
    for v in range(n_views):
        idx = np.array(sorted(members[v]), dtype=np.intp)
        if idx.size == 0 or output.match_logits[v] is None:
            continue
        rows = dn.gather_rows(output.match_logits[v], idx)
        targets = np.argmax(gt.match_matrices[v][idx], axis=1)
        pro_terms.append((dn.cross_entropy(rows, targets), idx.size))
    if pro_terms:
        total_rows = sum(n for _, n in pro_terms)
        l_pro = None
        for term, n in pro_terms:
            part = dn.scale(term, n / total_rows)
            l_pro = part if l_pro is None else dn.add(l_pro, part)
    else:
        l_pro = zero

    a_idx = np.nonzero(det.assigned)[0]
    if a_idx.size:
        logits = dn.gather_rows(output.class_logits, a_idx)
        l_cls = dn.cross_entropy(logits, det.class_ids[a_idx])
        pred = dn.gather_rows(output.box_deltas, a_idx)
        l_box = dn.mean_all(dn.abs_(dn.sub(pred, dn.tensor(det.deltas[a_idx]))))
        l_det = dn.add(l_cls, l_box)
    else:
        l_det = zero

    total = dn.add(l_det, dn.add(dn.scale(l_view, cfg.lambda_view),
                                 dn.scale(l_pro, cfg.lambda_pro)))
    comps = {"total": total.item(), "det": l_det.item(),
             "view": l_view.item(), "pro": l_pro.item()}
    return total, comps


# ---------------------------------------------------------------------------
# training

def _mean_grads(store: ParamStore, acc: dict[str, np.ndarray],
                pending: int) -> dict[str, np.ndarray]:
    grads = {}
    for name in store.names():
        g = acc.get(name)
        if g is None:
            grads[name] = np.zeros_like(store[name].data)
        else:
            grads[name] = g if pending == 1 else g / pending
    return grads


def train(cfg: TrainConfig, scenes: list[Scene],
          log=None) -> tuple[ParamStore, list[dict[str, float]]]:
    """Per-scene gradient steps over shuffled epochs; deterministic given the
    config seed and scene seeds. Returns the trained store and the per-epoch
    mean loss components."""
    cfg.validate()
    if not scenes:
        raise ValueError("training needs at least one scene")
    store = init_model(cfg)
    clean = DisturbanceSpec()
    history: list[dict[str, float]] = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, 1000 + epoch)).permutation(len(scenes))
        sums: dict[str, float] = {"total": 0.0, "det": 0.0, "view": 0.0, "pro": 0.0}
        count = 0
        pending = 0
        acc: dict[str, np.ndarray] = {}
        for si in order:
            scene = scenes[si]
            p3d, bev = simulate_lidar_branch(scene, cfg.scene, cfg.sim,
                                             seed=scene.seed)
            fmap, p2d = simulate_camera_branch(scene, clean, cfg.scene, cfg.sim,
                                               seed=scene.seed)
            if not p3d:
                continue
            gt = make_gt_correspondences(scene, p3d, p2d, scene.rig)
            out = run_pipeline(store, cfg, p3d, bev, fmap, p2d)
            loss, comps = total_loss(out, gt, detection_targets(scene, p3d), cfg)
            if not math.isfinite(comps["total"]):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, scene seed "
                    f"{scene.seed}: loss components {comps}")
            store.zero_grad()
            loss.backward()
            for name in store.names():
                g = store[name].grad
                if g is None:
                    continue
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g
            pending += 1
            if pending >= cfg.batch_scenes:
                dn.adamw_step(store, _mean_grads(store, acc, pending),
                              cfg.lr, cfg.weight_decay)
                acc = {}
                pending = 0
            for key in sums:
                sums[key] += comps[key]
            count += 1
        if pending:
            dn.adamw_step(store, _mean_grads(store, acc, pending),
                          cfg.lr, cfg.weight_decay)
            acc = {}
        epoch_mean = {key: (sums[key] / count if count else 0.0) for key in sums}
        history.append(epoch_mean)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs}: "
                + " ".join(f"{key}={val:.4f}" for key, val in epoch_mean.items()))
    return store, history


def save_model(path: str | Path, store: ParamStore, cfg: TrainConfig) -> None:
    dn.save_checkpoint(path, store, to_dict(cfg))


def load_model(path: str | Path) -> tuple[ParamStore, TrainConfig]:
    store, cfg_dict = dn.load_checkpoint(path)
    return store, train_config_from_dict(cfg_dict)


# ---------------------------------------------------------------------------
# metrics

def bev_iou(center_a, size_a, yaw_a, center_b, size_b, yaw_b) -> float:
    """Ground-plane IoU of two rotated box footprints."""
    pa = Polygon(_footprint(center_a, size_a, yaw_a))
    pb = Polygon(_footprint(center_b, size_b, yaw_b))
    if not pa.is_valid or not pb.is_valid:
        return 0.0
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    return inter / union if union > 0 else 0.0


def _footprint(center, size, yaw):
    corners = box_corners_3d(np.asarray(center, dtype=float),
                             np.asarray(size, dtype=float), yaw)
    return [(corners[i][0], corners[i][1]) for i in (0, 2, 6, 4)]


def match_counts(proposals3d: list[Proposal3D], proposals2d: list[Proposal2D],
                 predicted: list[tuple[int, int | None]]) -> tuple[int, int, int]:
    """(tp, fp, gt_pairs) of predictions given as (proposal row, flat 2D
    index or None); correctness is the src-object id join."""
    present = {p.src_object for p in proposals2d if p.src_object is not None}
    gt_pairs = sum(1 for p in proposals3d if p.src_object in present)
    tp = fp = 0
    for i, j in predicted:
        if j is None:
            continue
        src = proposals3d[i].src_object
        if src is not None and proposals2d[j].src_object == src:
            tp += 1
        else:
            fp += 1
    return tp, fp, gt_pairs


def prf(tp: int, fp: int, gt_pairs: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / gt_pairs if gt_pairs else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


# ---------------------------------------------------------------------------
# evaluation

def dump_scene_outputs(store: ParamStore, cfg: TrainConfig,
                       scenes: list[Scene], disturb: DisturbanceSpec,
                       path: str | Path) -> None:
    """One JSON line per scene: view assignments, matches, and refined
    predictions (class by argmax, score as the max softmax probability)."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"format_version": 1, "kind": "eval_dump"}
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for scene in scenes:
            p3d, bev = simulate_lidar_branch(scene, cfg.scene, cfg.sim,
                                             seed=scene.seed)
            if disturb.misalign_rot_deg != 0.0 or disturb.misalign_trans_m != 0.0:
                p3d, bev = apply_misalignment(
                    p3d, bev, disturb.misalign_rot_deg,
                    disturb.misalign_trans_m, cfg.scene.world_extent,
                    seed=scene.seed)
            fmap, p2d = simulate_camera_branch(scene, disturb, cfg.scene,
                                               cfg.sim, seed=scene.seed)
            out = run_pipeline(store, cfg, p3d, bev, fmap, p2d)
            predictions = []
            if out.class_logits is not None:
                probs = np.exp(out.class_logits.data
                               - out.class_logits.data.max(axis=1, keepdims=True))
                probs /= probs.sum(axis=1, keepdims=True)
                for i, p in enumerate(p3d):
                    d = out.box_deltas.data[i]
                    predictions.append({
                        "proposal": i,
                        "class": int(np.argmax(out.class_logits.data[i])),
                        "score": float(probs[i].max()),
                        "box": {
                            "center": (p.center + d[:3]).tolist(),
                            "size": np.maximum(p.size + d[3:6], 1e-3).tolist(),
                            "yaw": wrap_angle(p.yaw + d[6]),
                        },
                    })
            record = {
                "scene_seed": scene.seed,
                "view_assignments": [{"views": a.views, "no_view": a.no_view}
                                     for a in out.assignments],
                "matches": [m.to_dict() for m in out.matches],
                "predictions": predictions,
            }
            f.write(json.dumps(record, sort_keys=True,
                               separators=(",", ":")) + "\n")


def evaluate(store: ParamStore, cfg: TrainConfig, scenes: list[Scene],
             disturb: DisturbanceSpec, lidar_only: bool = False,
             topk: int | None = None, one_level: bool = False) -> EvalReport:
    """Run the full learned pipeline under a disturbance and score it against
    ground truth. Scoring labels always use the true rig and the id join;
    calibration perturbation fields have no effect on this path at all."""
    top1 = top2 = n_props = 0
    tp = fp = gt_pairs = 0
    unmatched = 0
    iou_sum = 0.0
    cls_hits = 0
    assigned_count = 0
    loss_sums = {"total": 0.0, "det": 0.0, "view": 0.0, "pro": 0.0}
    scored_scenes = 0
    for scene in scenes:
        p3d, bev = simulate_lidar_branch(scene, cfg.scene, cfg.sim,
                                         seed=scene.seed)
        if disturb.misalign_rot_deg != 0.0 or disturb.misalign_trans_m != 0.0:
            p3d, bev = apply_misalignment(p3d, bev, disturb.misalign_rot_deg,
                                          disturb.misalign_trans_m,
                                          cfg.scene.world_extent,
                                          seed=scene.seed)
        if lidar_only:
            fmap = ViewFeatureMap(np.zeros((cfg.scene.n_views, cfg.sim.fmap_h,
                                            cfg.sim.fmap_w, cfg.sim.feat_dim)))
            p2d: list[Proposal2D] = []
        else:
            fmap, p2d = simulate_camera_branch(scene, disturb, cfg.scene,
                                               cfg.sim, seed=scene.seed)
        if not p3d:
            continue
        out = run_pipeline(store, cfg, p3d, bev, fmap, p2d,
                           topk=topk, one_level=one_level)
        gt = make_gt_correspondences(scene, p3d, p2d, scene.rig,
                                     camera_dt=disturb.async_dt)
        _, comps = total_loss(out, gt, detection_targets(scene, p3d), cfg)
        for key in loss_sums:
            loss_sums[key] += comps[key]
        scored_scenes += 1

        logits = out.view_logits.data
        order = np.argsort(-logits, axis=1, kind="stable")
        top1 += int((order[:, 0] == gt.view_labels).sum())
        top2 += int((order[:, :2] == gt.view_labels[:, None]).any(axis=1).sum())
        n_props += len(p3d)

        predicted = []
        for m in out.matches:
            if m.view is None:
                unmatched += 1
                predicted.append((m.proposal, None))
            else:
                predicted.append((m.proposal, out.view_groups[m.view][m.box2d_index]))
        s_tp, s_fp, s_gt = match_counts(p3d, p2d, predicted)
        tp += s_tp
        fp += s_fp
        gt_pairs += s_gt

        det = detection_targets(scene, p3d)
        for i in np.nonzero(det.assigned)[0]:
            d = out.box_deltas.data[i]
            refined_center = p3d[i].center + d[:3]
            refined_size = np.maximum(p3d[i].size + d[3:6], 1e-3)
            refined_yaw = wrap_angle(p3d[i].yaw + d[6])
            target_center = p3d[i].center + det.deltas[i][:3]
            target_size = p3d[i].size + det.deltas[i][3:6]
            target_yaw = wrap_angle(p3d[i].yaw + det.deltas[i][6])
            iou_sum += bev_iou(refined_center, refined_size, refined_yaw,
                               target_center, target_size, target_yaw)
            cls_hits += int(np.argmax(out.class_logits.data[i]) == det.class_ids[i])
            assigned_count += 1

    precision, recall, f1 = prf(tp, fp, gt_pairs)
    iou_mean = iou_sum / assigned_count if assigned_count else 0.0
    cls_acc = cls_hits / assigned_count if assigned_count else 0.0
    return EvalReport(
        n_scenes=len(scenes),
        n_proposals=n_props,
        view_top1_acc=top1 / n_props if n_props else 0.0,
        view_top2_acc=top2 / n_props if n_props else 0.0,
        match_precision=precision,
        match_recall=recall,
        match_f1=f1,
        no_view_rate=unmatched / n_props if n_props else 0.0,
        bev_iou=iou_mean,
        class_acc=cls_acc,
        detection_score=0.5 * (iou_mean + cls_acc),
        loss_total=loss_sums["total"] / scored_scenes if scored_scenes else 0.0,
        loss_det=loss_sums["det"] / scored_scenes if scored_scenes else 0.0,
        loss_view=loss_sums["view"] / scored_scenes if scored_scenes else 0.0,
        loss_pro=loss_sums["pro"] / scored_scenes if scored_scenes else 0.0,
    )
