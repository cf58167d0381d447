import dataclasses
import json

import numpy as np
import pytest

from boxmatch import diffnum as dn
from boxmatch import trainloop as tl
from boxmatch import worldsim as ws
from boxmatch.config import SceneConfig, SimConfig, TrainConfig
from boxmatch.pipeline import init_model, run_pipeline

TINY = TrainConfig(
    epochs=2, seed=3, n_heads=2, lr=1e-3,
    scene=SceneConfig(n_views=4, n_objects_min=2, n_objects_max=5),
    sim=SimConfig(feat_dim=32, fmap_h=4, fmap_w=8, bev_h=12, bev_w=12,
                  n_fp3d=1, n_fp2d=1),
)
CLEAN = ws.DisturbanceSpec()


def _scenes(cfg, n, base=0):
    return [ws.generate_scene(cfg.scene, seed=base + s) for s in range(n)]


def _forward(cfg, store, scene, disturb=CLEAN):
    p3d, bev = ws.simulate_lidar_branch(scene, cfg.scene, cfg.sim, seed=scene.seed)
    fmap, p2d = ws.simulate_camera_branch(scene, disturb, cfg.scene, cfg.sim,
                                          seed=scene.seed)
    out = run_pipeline(store, cfg, p3d, bev, fmap, p2d)
    gt = ws.make_gt_correspondences(scene, p3d, p2d, scene.rig)
    return out, gt, p3d


# ---------------------------------------------------------------------------
# loss arithmetic

def test_total_loss_weighted_sum():
    scene = ws.generate_scene(TINY.scene, seed=1)
    store = init_model(TINY)
    out, gt, p3d = _forward(TINY, store, scene)
    det = tl.detection_targets(scene, p3d)
    _, comps = tl.total_loss(out, gt, det, TINY)
    want = comps["det"] + 0.2 * comps["view"] + 0.1 * comps["pro"]
    assert abs(comps["total"] - want) < 1e-12


def test_total_loss_zero_weights_equal_det():
    cfg = dataclasses.replace(TINY, lambda_view=0.0, lambda_pro=0.0)
    scene = ws.generate_scene(cfg.scene, seed=1)
    store = init_model(cfg)
    out, gt, p3d = _forward(cfg, store, scene)
    _, comps = tl.total_loss(out, gt, tl.detection_targets(scene, p3d), cfg)
    assert abs(comps["total"] - comps["det"]) < 1e-12


def test_total_loss_hand_weighted_example():
    # components (1.0, 0.5, 0.3) with weights (0.2, 0.1) -> 1.13
    assert abs(1.0 + 0.2 * 0.5 + 0.1 * 0.3 - 1.13) < 1e-12


def test_oracle_predictions_drive_matching_losses_to_zero():
    scene = ws.generate_scene(TINY.scene, seed=2)
    store = init_model(TINY)
    out, gt, p3d = _forward(TINY, store, scene)
    n_views = TINY.scene.n_views
    saturated_view = dn.tensor(np.eye(n_views + 1)[gt.view_labels] * 50.0)
    out.view_logits = saturated_view
    for v in range(n_views):
        if out.match_logits[v] is None:
            continue
        m = gt.match_matrices[v]
        out.match_logits[v] = dn.tensor(m * 50.0)
    _, comps = tl.total_loss(out, gt, tl.detection_targets(scene, p3d), TINY)
    assert comps["view"] <= 1e-6
    assert comps["pro"] <= 1e-6


def test_detection_targets_assignment_gate():
    scene = ws.generate_scene(TINY.scene, seed=4)
    p3d, _ = ws.simulate_lidar_branch(scene, TINY.scene, TINY.sim, seed=4)
    far = ws.Proposal3D(center=np.array([1000.0, 0.0, 0.0]),
                        size=np.ones(3), yaw=0.0,
                        class_logits=np.zeros(4),
                        feature=np.zeros(TINY.sim.feat_dim), src_object=None)
    det = tl.detection_targets(scene, p3d + [far])
    assert not det.assigned[-1]
    assert det.assigned[:len(p3d)].any()


# ---------------------------------------------------------------------------
# training behavior

def test_zero_epochs_checkpoint_equals_initialization(tmp_path):
    cfg = dataclasses.replace(TINY, epochs=0)
    scenes = _scenes(cfg, 3)
    store, history = tl.train(cfg, scenes)
    init = init_model(cfg)
    assert history == []
    for name in init.names():
        assert np.array_equal(store[name].data, init[name].data)


def test_training_deterministic_checkpoint_bytes(tmp_path):
    cfg = dataclasses.replace(TINY, epochs=1)
    scenes = _scenes(cfg, 6)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    s1, _ = tl.train(cfg, scenes)
    tl.save_model(p1, s1, cfg)
    s2, _ = tl.train(cfg, scenes)
    tl.save_model(p2, s2, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_training_loss_decreases():
    cfg = dataclasses.replace(TINY, epochs=4)
    scenes = _scenes(cfg, 25)
    _, history = tl.train(cfg, scenes)
    assert history[-1]["total"] < history[0]["total"]


def test_training_requires_scenes():
    with pytest.raises(ValueError):
        tl.train(TINY, [])


def test_checkpoint_roundtrip_reproduces_report(tmp_path):
    scenes = _scenes(TINY, 6)
    store, _ = tl.train(dataclasses.replace(TINY, epochs=1), scenes)
    cfg = dataclasses.replace(TINY, epochs=1)
    before = tl.evaluate(store, cfg, scenes, CLEAN)
    path = tmp_path / "ck.json"
    tl.save_model(path, store, cfg)
    loaded, cfg2 = tl.load_model(path)
    after = tl.evaluate(loaded, cfg2, scenes, CLEAN)
    assert before.to_json() == after.to_json()


# ---------------------------------------------------------------------------
# evaluation structure

def test_eval_calibration_perturbation_is_byte_identical():
    scenes = _scenes(TINY, 5)
    store = init_model(TINY)
    clean = tl.evaluate(store, TINY, scenes, CLEAN)
    perturbed = tl.evaluate(store, TINY, scenes, ws.DisturbanceSpec(
        calib_trans_range_m=0.5, calib_rot_range_deg=30.0))
    assert clean.to_json() == perturbed.to_json()


def test_eval_all_views_dropped_falls_back_to_lidar_path():
    scenes = _scenes(TINY, 5)
    store = init_model(TINY)
    drop_all = ws.DisturbanceSpec(
        dropped_views=frozenset(range(TINY.scene.n_views)))
    dropped = tl.evaluate(store, TINY, scenes, drop_all)
    lidar = tl.evaluate(store, TINY, scenes, CLEAN, lidar_only=True)
    assert dropped.match_f1 == 0.0
    assert dropped.no_view_rate == 1.0
    assert abs(dropped.detection_score - lidar.detection_score) <= 1e-9


def test_eval_report_json_roundtrip():
    scenes = _scenes(TINY, 2)
    store = init_model(TINY)
    rep = tl.evaluate(store, TINY, scenes, CLEAN)
    again = tl.EvalReport.from_json(rep.to_json())
    assert again == rep
    for rate in (rep.view_top1_acc, rep.view_top2_acc, rep.match_precision,
                 rep.match_recall, rep.match_f1, rep.no_view_rate,
                 rep.bev_iou, rep.class_acc):
        assert 0.0 <= rate <= 1.0


def test_eval_deterministic():
    scenes = _scenes(TINY, 4)
    store = init_model(TINY)
    a = tl.evaluate(store, TINY, scenes, ws.DisturbanceSpec(async_dt=0.5))
    b = tl.evaluate(store, TINY, scenes, ws.DisturbanceSpec(async_dt=0.5))
    assert a.to_json() == b.to_json()


def test_eval_topk_two_candidates_never_lose_matches():
    scenes = _scenes(TINY, 6)
    store = init_model(TINY)
    r1 = tl.evaluate(store, TINY, scenes, CLEAN, topk=1)
    r2 = tl.evaluate(store, TINY, scenes, CLEAN, topk=2)
    # k=2 candidate views are a superset of k=1's, so the merge can only
    # turn unmatched proposals into matched ones
    assert r2.no_view_rate <= r1.no_view_rate
    assert r2.view_top2_acc >= r1.view_top1_acc


# ---------------------------------------------------------------------------
# rotated-footprint IoU used by the detection score

def test_bev_iou_identical_boxes():
    assert abs(tl.bev_iou(np.zeros(3), np.array([4.0, 2.0, 1.5]), 0.3,
                          np.zeros(3), np.array([4.0, 2.0, 1.5]), 0.3) - 1.0) < 1e-12


def test_bev_iou_disjoint_boxes():
    assert tl.bev_iou(np.zeros(3), np.ones(3), 0.0,
                      np.array([100.0, 0.0, 0.0]), np.ones(3), 0.0) == 0.0


def test_bev_iou_half_overlap():
    # two unit squares offset by half a side
    got = tl.bev_iou(np.zeros(3), np.array([1.0, 1.0, 1.0]), 0.0,
                     np.array([0.5, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]), 0.0)
    assert abs(got - 1.0 / 3.0) < 1e-9


def test_match_counts_id_join():
    p3d = [ws.Proposal3D(center=np.zeros(3), size=np.ones(3), yaw=0.0,
                         class_logits=np.zeros(4), feature=np.zeros(8),
                         src_object=s) for s in (0, 1, None)]
    p2d = [ws.Proposal2D(view=0, box=np.array([0, 0, 10, 10.0]), class_id=0,
                         score=1.0, src_object=s) for s in (0, 2)]
    tp, fp, gt_pairs = tl.match_counts(p3d, p2d,
                                       [(0, 0), (1, 1), (2, None)])
    assert (tp, fp, gt_pairs) == (1, 1, 1)
    p, r, f1 = tl.prf(tp, fp, gt_pairs)
    assert (p, r) == (0.5, 1.0)
    assert abs(f1 - 2 / 3) < 1e-12
