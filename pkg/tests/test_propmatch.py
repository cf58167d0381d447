import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxmatch import diffnum as dn
from boxmatch import propmatch as pm
from boxmatch import worldsim as ws
from boxmatch.config import SceneConfig, SimConfig
from helpers import fd_directional


def _store(c=16, n_classes=4, seed=0):
    store = dn.ParamStore()
    pm.init_params(store, c, n_classes, np.random.default_rng(seed))
    return store


def _identityish_roimlp(store, c):
    # first layer passes features through (with a large bias shift making the
    # ReLU affine), second layer undoes the shift
    shift = 100.0
    store["prop2d.roimlp.0.w"].data[:] = np.eye(c)
    store["prop2d.roimlp.0.b"].data[:] = shift
    store["prop2d.roimlp.1.w"].data[:] = np.eye(c)
    store["prop2d.roimlp.1.b"].data[:] = -shift


# ---------------------------------------------------------------------------
# ROI pooling

def test_roi_pool_constant_field():
    c = 6
    fmap = np.full((5, 5, c), 3.25)
    pooled = pm.roi_pool_grid(fmap, np.array([1.0, 1.0, 4.0, 3.0]))
    assert np.allclose(pooled, 3.25, atol=1e-12)


def test_roi_pool_full_map_equals_global_mean():
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(7, 7, 4))
    pooled = pm.roi_pool_grid(fmap, np.array([0.0, 0.0, 7.0, 7.0]), grid=7)
    assert np.max(np.abs(pooled - fmap.mean(axis=(0, 1)))) < 1e-9


def test_roi_pool_degenerate_box_is_zero():
    fmap = np.ones((4, 4, 3))
    assert np.array_equal(pm.roi_pool_grid(fmap, np.array([2.0, 1.0, 2.0, 3.0])),
                          np.zeros(3))


def test_roi_pool_matches_scalar_bilinear_oracle():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(6, 9, 3))
    h, w = 6, 9
    for _ in range(20):
        x1, y1 = rng.uniform(0, 7, 2)
        box = np.array([x1, y1, x1 + rng.uniform(0.3, 2.0),
                        y1 + rng.uniform(0.3, 2.0)])
        pooled = pm.roi_pool_grid(fmap, box, grid=7)
        # independent scalar-loop bilinear sampling oracle
        acc = np.zeros(3)
        for i in range(7):
            yy = box[1] + (i + 0.5) * (box[3] - box[1]) / 7
            for j in range(7):
                xx = box[0] + (j + 0.5) * (box[2] - box[0]) / 7
                uu, vv = xx - 0.5, yy - 0.5
                j0, i0 = math.floor(uu), math.floor(vv)
                fu, fv = uu - j0, vv - i0
                j0c, j1c = min(max(j0, 0), w - 1), min(max(j0 + 1, 0), w - 1)
                i0c, i1c = min(max(i0, 0), h - 1), min(max(i0 + 1, 0), h - 1)
                acc += ((1 - fv) * (1 - fu) * fmap[i0c, j0c]
                        + (1 - fv) * fu * fmap[i0c, j1c]
                        + fv * (1 - fu) * fmap[i1c, j0c]
                        + fv * fu * fmap[i1c, j1c])
        assert np.max(np.abs(pooled - acc / 49.0)) < 1e-9


def test_roi_pool_2d_rows_align_with_boxes():
    c = 16
    store = _store(c=c)
    _identityish_roimlp(store, c)
    fmap = np.random.default_rng(2).normal(size=(5, 5, c))
    boxes = np.array([[0.0, 0.0, 5.0, 5.0], [1.0, 1.0, 2.0, 2.0]])
    out = pm.roi_pool_2d(fmap, boxes, store)
    for i, b in enumerate(boxes):
        assert np.allclose(out.data[i], pm.roi_pool_grid(fmap, b), atol=1e-9)


# ---------------------------------------------------------------------------
# embeddings

def test_embed_2d_identical_rows():
    c = 16
    store = _store(c=c)
    rois = dn.tensor(np.tile(np.arange(c, dtype=float), (2, 1)))
    out = pm.embed_2d(rois, np.array([1, 1]),
                      np.tile(np.array([10.0, 20.0, 30.0, 40.0]), (2, 1)),
                      320, 192, 4, store)
    assert np.array_equal(out.data[0], out.data[1])


def test_embed_2d_zero_final_layer():
    c = 16
    store = _store(c=c)
    store["prop2d.commlp.1.w"].data[:] = 0.0
    store["prop2d.commlp.1.b"].data[:] = 0.0
    out = pm.embed_2d(dn.tensor(np.ones((3, c))), np.array([0, 1, 2]),
                      np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (3, 1)),
                      320, 192, 4, store)
    assert np.array_equal(out.data, np.zeros((3, c)))


def test_embed_2d_unknown_class():
    store = _store()
    with pytest.raises(ValueError):
        pm.embed_2d(dn.tensor(np.ones((1, 16))), np.array([9]),
                    np.ones((1, 4)), 320, 192, 4, store)


def test_embed_2d_gradcheck():
    c = 8
    store = _store(c=c, seed=3)
    rng = np.random.default_rng(4)
    rois = dn.Tensor(rng.normal(size=(3, c)), requires_grad=True)
    boxes = rng.uniform(0, 100, (3, 4))
    cls = np.array([0, 2, 1])

    def f():
        return dn.mean_all(pm.embed_2d(rois, cls, boxes, 320, 192, 4, store))

    params = [store[n] for n in store.names() if n.startswith("prop2d")]
    assert fd_directional(f, [rois] + params, rng, n_dirs=2) < 1e-5


def test_embed_3d_zero_final_layer():
    c = 16
    store = _store(c=c)
    store["prop3d.commlp.1.w"].data[:] = 0.0
    store["prop3d.commlp.1.b"].data[:] = 0.0
    out = pm.embed_3d(dn.tensor(np.ones((2, c))), np.array([0, 1]),
                      np.zeros((2, 3)), 44.0, 4, store)
    assert np.array_equal(out.data, np.zeros((2, c)))


def test_embed_3d_permutation_equivariance():
    c = 16
    store = _store(c=c)
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(5, c))
    cls = rng.integers(0, 4, 5)
    centers = rng.normal(size=(5, 3)) * 10
    out = pm.embed_3d(dn.tensor(feats), cls, centers, 44.0, 4, store)
    perm = rng.permutation(5)
    out_p = pm.embed_3d(dn.tensor(feats[perm]), cls[perm], centers[perm],
                        44.0, 4, store)
    assert np.allclose(out.data[perm], out_p.data, atol=1e-12)


def test_embed_3d_gradcheck():
    c = 8
    store = _store(c=c, seed=6)
    rng = np.random.default_rng(7)
    feats = dn.Tensor(rng.normal(size=(4, c)), requires_grad=True)
    cls = np.array([0, 1, 2, 3])
    centers = rng.normal(size=(4, 3)) * 10

    def f():
        return dn.mean_all(pm.embed_3d(feats, cls, centers, 44.0, 4, store))

    params = [store[n] for n in store.names() if n.startswith("prop3d")]
    assert fd_directional(f, [feats] + params, rng, n_dirs=2) < 1e-5


# ---------------------------------------------------------------------------
# matching matrix

def test_matching_matrix_hand_example():
    e3 = dn.tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    e2 = dn.tensor(np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]]))
    mp = pm.matching_matrix(e3, e2)
    assert np.array_equal(mp.data, [[0.5, 0.0, 0.0]])


def test_matching_matrix_null_column_is_zero():
    rng = np.random.default_rng(8)
    mp = pm.matching_matrix(dn.tensor(rng.normal(size=(6, 8))),
                            dn.tensor(rng.normal(size=(5, 8))))
    assert np.array_equal(mp.data[:, -1], np.zeros(6))


def test_matching_matrix_empty_2d():
    mp = pm.matching_matrix(dn.tensor(np.ones((3, 4))), None)
    assert mp.data.shape == (3, 1)
    assert np.array_equal(mp.data, np.zeros((3, 1)))


def test_matching_matrix_matches_scalar_loop_oracle():
    rng = np.random.default_rng(9)
    e3 = rng.normal(size=(6, 8))
    e2 = rng.normal(size=(5, 8))
    mp = pm.matching_matrix(dn.tensor(e3), dn.tensor(e2))
    for i in range(6):
        for j in range(5):
            acc = 0.0
            for d in range(8):
                acc += e3[i, d] * e2[j, d]
            assert abs(mp.data[i, j] - acc / math.sqrt(8)) < 1e-12
        assert mp.data[i, 5] == 0.0


def test_matching_matrix_dim_mismatch():
    with pytest.raises(dn.ShapeError):
        pm.matching_matrix(dn.tensor(np.ones((2, 4))), dn.tensor(np.ones((3, 6))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matching_matrix_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    e3 = rng.normal(size=(4, 6))
    e2 = rng.normal(size=(3, 6))
    mp = pm.matching_matrix(dn.tensor(e3), dn.tensor(e2)).data
    pr = rng.permutation(4)
    pc = rng.permutation(3)
    mp_p = pm.matching_matrix(dn.tensor(e3[pr]), dn.tensor(e2[pc])).data
    assert np.allclose(mp[pr][:, list(pc) + [3]], mp_p, atol=1e-12)


def test_matching_composite_gradcheck():
    c = 8
    store = _store(c=c, seed=10)
    rng = np.random.default_rng(11)
    f3 = dn.Tensor(rng.normal(size=(4, c)), requires_grad=True)
    rois = dn.Tensor(rng.normal(size=(3, c)), requires_grad=True)
    boxes = rng.uniform(0, 100, (3, 4))
    centers = rng.normal(size=(4, 3)) * 10
    targets = np.array([0, 1, 3, 3])

    def f():
        e3 = pm.embed_3d(f3, np.array([0, 1, 2, 3]), centers, 44.0, 4, store)
        e2 = pm.embed_2d(rois, np.array([0, 1, 2]), boxes, 320, 192, 4, store)
        return dn.cross_entropy(pm.matching_matrix(e3, e2), targets)

    params = [store[n] for n in store.names()]
    assert fd_directional(f, [f3, rois] + params, rng, n_dirs=2) < 1e-5


# ---------------------------------------------------------------------------
# pair extraction

def test_extract_pairs_softmax_row():
    probs = np.array([0.05, 0.9, 0.05])
    row = np.log(probs)
    out = pm.extract_pairs(row.reshape(1, 3), threshold=0.1)
    assert out[0].col == 1
    assert abs(out[0].score - 0.9) < 1e-12


def test_extract_pairs_null_wins():
    out = pm.extract_pairs(np.array([[0.0, 0.0, 5.0]]), threshold=0.1)
    assert out[0].col is None


def test_extract_pairs_below_threshold_unmatched():
    # 11 even columns: max prob 1/11 < 0.1
    out = pm.extract_pairs(np.zeros((1, 11)), threshold=0.1)
    assert out[0].col is None


def test_extract_pairs_matches_brute_force_row_scan():
    rng = np.random.default_rng(12)
    mp = rng.normal(0, 2, (8, 9))
    out = pm.extract_pairs(mp, threshold=0.1)
    for i in range(8):
        e = np.exp(mp[i] - mp[i].max())
        p = e / e.sum()
        best_j, best_p = 0, p[0]
        for j in range(1, 9):
            if p[j] > best_p:
                best_j, best_p = j, p[j]
        if best_j == 8 or best_p < 0.1:
            assert out[i].col is None
        else:
            assert out[i].col == best_j
            assert abs(out[i].score - best_p) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_extract_pairs_shift_invariance_and_prob_sum(seed, const):
    rng = np.random.default_rng(seed)
    mp = rng.normal(0, 2, (4, 5))
    a = pm.extract_pairs(mp)
    b = pm.extract_pairs(mp + const)
    for ra, rb in zip(a, b):
        assert ra.col == rb.col
        assert abs(ra.score - rb.score) < 1e-9
        assert 0.0 < ra.score <= 1.0


def test_extract_pairs_tie_breaks_lower_index():
    out = pm.extract_pairs(np.array([[3.0, 3.0, 0.0]]), threshold=0.1)
    assert out[0].col == 0


# ---------------------------------------------------------------------------
# cross-view merge

def test_merge_single_candidate_passthrough():
    got = pm.merge_across_views([(2, pm.RowMatch(col=1, score=0.7))])
    assert got == (2, 1, 0.7)


def test_merge_keeps_max_score():
    got = pm.merge_across_views([(0, pm.RowMatch(col=1, score=0.6)),
                                 (1, pm.RowMatch(col=0, score=0.8))])
    assert got == (1, 0, 0.8)


def test_merge_all_unmatched():
    assert pm.merge_across_views([(0, pm.RowMatch(col=None, score=0.5))]) is None
    assert pm.merge_across_views([]) is None


# ---------------------------------------------------------------------------
# oracle-embedding recovery

def _full_detection_configs():
    cfg = SceneConfig(n_objects_min=5, n_objects_max=12)
    sim = dataclasses.replace(
        SimConfig(), p_det3d=1.0, n_fp3d=0, p_det2d=1.0, n_fp2d=0,
        center_jitter=0.0, size_jitter=0.0, yaw_jitter=0.0, feat_noise3d=0.0,
        box_jitter_px=0.0, feat_noise2d=0.0, bg_noise=0.0)
    return cfg, sim


def test_oracle_embeddings_recover_gt_argmax_on_full_detection_scenes():
    # rows are checked in the views that contain their counterpart: a row
    # with no counterpart in a view is all-zero under one-hot embeddings and
    # ties uniformly, carrying no information either way
    cfg, sim = _full_detection_configs()
    checked = 0
    for seed in range(8):
        scene = ws.generate_scene(cfg, seed=seed)
        p3d, _ = ws.simulate_lidar_branch(scene, cfg, sim, seed=seed)
        _, p2d = ws.simulate_camera_branch(scene, ws.DisturbanceSpec(), cfg,
                                           sim, seed=seed)
        gt = ws.make_gt_correspondences(scene, p3d, p2d, scene.rig)
        n_slots = len(scene.objects)
        e3 = np.eye(n_slots)[[p.src_object for p in p3d]] * 4.0 * math.sqrt(n_slots)
        for v in range(cfg.n_views):
            cols = gt.view_groups[v]
            if not cols:
                continue
            e2 = np.eye(n_slots)[[p2d[j].src_object for j in cols]] \
                * 4.0 * math.sqrt(n_slots)
            mp = pm.matching_matrix(dn.tensor(e3), dn.tensor(e2))
            out = pm.extract_pairs(mp.data, threshold=0.1)
            for i, rm in enumerate(out):
                want = int(np.argmax(gt.match_matrices[v][i]))
                if want == len(cols):
                    continue
                assert rm.col == want
                checked += 1
    assert checked > 50


def test_merged_matching_at_least_as_good_as_single_view():
    cfg, sim = _full_detection_configs()
    sim = dataclasses.replace(sim, p_det2d=0.7)
    merged_hits = single_hits = 0
    for seed in range(50):
        scene = ws.generate_scene(cfg, seed=seed)
        p3d, _ = ws.simulate_lidar_branch(scene, cfg, sim, seed=seed)
        _, p2d = ws.simulate_camera_branch(scene, ws.DisturbanceSpec(), cfg,
                                           sim, seed=seed)
        gt = ws.make_gt_correspondences(scene, p3d, p2d, scene.rig)
        n_slots = len(scene.objects)
        e3 = np.eye(n_slots)[[p.src_object for p in p3d]] * 4.0 * math.sqrt(n_slots)
        rows_by_view = {}
        for v in range(cfg.n_views):
            cols = gt.view_groups[v]
            if not cols:
                rows_by_view[v] = None
                continue
            e2 = np.eye(n_slots)[[p2d[j].src_object for j in cols]] \
                * 4.0 * math.sqrt(n_slots)
            mp = pm.matching_matrix(dn.tensor(e3), dn.tensor(e2))
            rows_by_view[v] = pm.extract_pairs(mp.data, threshold=0.1)
        for i, p in enumerate(p3d):
            views = gt.view_label_sets[i]
            if not views:
                continue

            def hit(match):
                if match is None:
                    return 0
                v, col, _ = match
                return int(p2d[gt.view_groups[v][col]].src_object == p.src_object)

            cands = [(v, rows_by_view[v][i]) for v in views
                     if rows_by_view[v] is not None]
            merged_hits += hit(pm.merge_across_views(cands))
            single = [(v, rm) for v, rm in cands[:1]]
            single_hits += hit(pm.merge_across_views(single))
    assert merged_hits >= single_hits
    assert merged_hits > 0
