"""Synthetic multi-view world: scenes with ground-truth cross-modal links,
pinhole ring-rig projection, the two detector-branch simulators, and the
disturbance injectors (asynchrony, misalignment, drops, feature corruption,
calibration perturbation)."""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, SceneConfig, SimConfig, scene_config_from_dict, to_dict

SCENES_FORMAT_VERSION = 1

# substream tags so each consumer of a seed draws independently
_S_SCENE = 11
_S_LIDAR = 21
_S_CAMERA = 31
_S_CORRUPT = 41
_S_MISALIGN = 51
_S_CALIB = 61

# fixed mixer seeds: the same deterministic maps couple appearance vectors to
# branch features across every scene, which is what makes matching learnable
_MIX_3D = 101
_MIX_IMG = 102
_MIX_BEV = 103
_MIX_PROTO = 104


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics plus world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    img_w: int
    img_h: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.img_w <= 0 or self.img_h <= 0:
            raise ConfigError("image bounds must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise ConfigError("R must be orthonormal")


@dataclass
class SceneObject:
    id: int
    class_id: int
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    appearance: np.ndarray


@dataclass
class Scene:
    objects: list[SceneObject]
    rig: list[CameraModel]
    timestamp: float
    seed: int


@dataclass
class Proposal3D:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_logits: np.ndarray
    feature: np.ndarray
    src_object: int | None = None


@dataclass
class Proposal2D:
    view: int
    box: np.ndarray
    class_id: int
    score: float
    src_object: int | None = None


@dataclass
class ViewFeatureMap:
    data: np.ndarray  # (n_views, h, w, c)


@dataclass(frozen=True)
class DisturbanceSpec:
    """One benchmark point: which corruptions to inject and how hard."""

    async_dt: float = 0.0
    misalign_rot_deg: float = 0.0
    misalign_trans_m: float = 0.0
    dropped_views: frozenset[int] = frozenset()
    feat_gain: float = 1.0
    feat_noise_amp: float = 0.0
    calib_trans_range_m: float = 0.0
    calib_rot_range_deg: float = 0.0

    def validate(self, n_views: int) -> None:
        if self.async_dt < 0:
            raise ConfigError("async_dt must be >= 0")
        if any(v < 0 or v >= n_views for v in self.dropped_views):
            raise ConfigError("dropped view index out of range")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dropped_views"] = sorted(self.dropped_views)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DisturbanceSpec":
        d = dict(d)
        d["dropped_views"] = frozenset(d.get("dropped_views", ()))
        return DisturbanceSpec(**d)


# ---------------------------------------------------------------------------
# rig and projection

def build_ring_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Outward-facing cameras evenly spaced on a small ring, overlapping FOVs."""
    fx = (cfg.img_w / 2.0) / math.tan(math.radians(cfg.hfov_deg) / 2.0)
    rig = []
    for k in range(cfg.n_views):
        theta = 2.0 * math.pi * k / cfg.n_views
        ct, st = math.cos(theta), math.sin(theta)
        # camera axes in world coords: x right, y down, z forward (optical axis)
        R = np.array([[st, -ct, 0.0],
                      [0.0, 0.0, -1.0],
                      [ct, st, 0.0]])
        center = np.array([cfg.ring_radius * ct, cfg.ring_radius * st, cfg.cam_height])
        t = -R @ center
        rig.append(CameraModel(fx=fx, fy=fx, cx=cfg.img_w / 2.0, cy=cfg.img_h / 2.0,
                               R=R, t=t, img_w=cfg.img_w, img_h=cfg.img_h))
    return rig


def box_corners_3d(center: np.ndarray, size: np.ndarray, yaw: float) -> np.ndarray:
    """The 8 corners of an oriented box, (8, 3)."""
    l, w, h = size
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2.0)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (w / 2.0)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (h / 2.0)
    c, s = math.cos(yaw), math.sin(yaw)
    x = c * sx - s * sy + center[0]
    y = s * sx + c * sy + center[1]
    z = sz + center[2]
    return np.stack([x, y, z], axis=1)


def project_point(cam: CameraModel, p: np.ndarray) -> tuple[float, float, float]:
    """(u, v, depth) of a world point; depth <= 0 means behind the camera."""
    pc = cam.R @ p + cam.t
    z = pc[2]
    if z <= 0:
        return 0.0, 0.0, z
    return cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy, z


def point_in_view(cam: CameraModel, p: np.ndarray) -> bool:
    u, v, z = project_point(cam, p)
    return z > 0 and 0.0 <= u <= cam.img_w and 0.0 <= v <= cam.img_h


def _project_boxes_batch(cam: CameraModel, centers: np.ndarray,
                         sizes: np.ndarray, yaws: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """project_box over object arrays: (boxes (n, 4), valid (n,), depth (n,));
    follows the single-box arithmetic exactly."""
    n = len(centers)
    pc = centers @ cam.R.T + cam.t
    depth = pc[:, 2]
    valid = depth > 0
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (sizes[:, 0:1] / 2.0)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (sizes[:, 1:2] / 2.0)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (sizes[:, 2:3] / 2.0)
    cy = np.array([math.cos(y) for y in yaws])[:, None]
    sy_ = np.array([math.sin(y) for y in yaws])[:, None]
    wx = cy * sx - sy_ * sy + centers[:, 0:1]
    wy = sy_ * sx + cy * sy + centers[:, 1:2]
    wz = sz + centers[:, 2:3]
    corners = np.stack([wx, wy, wz], axis=-1)
    cc = corners @ cam.R.T + cam.t
    z = np.maximum(cc[..., 2], 1e-6)
    u = cam.fx * cc[..., 0] / z + cam.cx
    v = cam.fy * cc[..., 1] / z + cam.cy
    x1 = np.maximum(u.min(axis=1), 0.0)
    x2 = np.minimum(u.max(axis=1), float(cam.img_w))
    y1 = np.maximum(v.min(axis=1), 0.0)
    y2 = np.minimum(v.max(axis=1), float(cam.img_h))
    valid = valid & (x2 > x1) & (y2 > y1)
    return np.stack([x1, y1, x2, y2], axis=1), valid, depth


def project_box(cam: CameraModel, center: np.ndarray, size: np.ndarray,
                yaw: float) -> np.ndarray | None:
    """Axis-aligned pixel hull of the projected box corners, clipped to the
    image; None if the box center is behind the camera or the clipped area
    is empty."""
    pc = cam.R @ np.asarray(center, dtype=np.float64) + cam.t
    if pc[2] <= 0:
        return None
    corners = box_corners_3d(np.asarray(center, dtype=np.float64),
                             np.asarray(size, dtype=np.float64), yaw)
    cc = corners @ cam.R.T + cam.t
    z = np.maximum(cc[:, 2], 1e-6)  # guard corners that poke behind the plane
    u = cam.fx * cc[:, 0] / z + cam.cx
    v = cam.fy * cc[:, 1] / z + cam.cy
    x1, x2 = max(u.min(), 0.0), min(u.max(), float(cam.img_w))
    y1, y2 = max(v.min(), 0.0), min(v.max(), float(cam.img_h))
    if x2 <= x1 or y2 <= y1:
        return None
    return np.array([x1, y1, x2, y2])


# ---------------------------------------------------------------------------
# scene generation and kinematics

def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Objects placed in an annulus around the rig; deterministic given seed."""
    cfg.validate()
    rng = np.random.default_rng((seed, _S_SCENE))
    n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    prototypes = _mixer(_MIX_PROTO, cfg.n_classes, cfg.appearance_dim) \
        * math.sqrt(cfg.appearance_dim)
    objects = []
    for i in range(n):
        r = rng.uniform(cfg.min_range, cfg.max_range)
        phi = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(*cfg.length_range)
        width = rng.uniform(*cfg.width_range)
        height = rng.uniform(*cfg.height_range)
        yaw = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, cfg.speed_max)
        direction = rng.uniform(-math.pi, math.pi)
        class_id = int(rng.integers(0, cfg.n_classes))
        # appearance clusters around a fixed per-class prototype with an
        # individual component, mirroring category-correlated looks
        appearance = (prototypes[class_id]
                      + cfg.appearance_noise * rng.normal(0.0, 1.0, cfg.appearance_dim))
        objects.append(SceneObject(
            id=i,
            class_id=class_id,
            center=np.array([r * math.cos(phi), r * math.sin(phi), height / 2.0]),
            size=np.array([length, width, height]),
            yaw=yaw,
            velocity=np.array([speed * math.cos(direction), speed * math.sin(direction)]),
            appearance=appearance,
        ))
    return Scene(objects=objects, rig=build_ring_rig(cfg), timestamp=0.0, seed=seed)


def scene_at(scene: Scene, dt: float) -> Scene:
    """The scene advanced by dt seconds under constant ground-plane velocity."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    objects = []
    for o in scene.objects:
        shift = np.array([o.velocity[0] * dt, o.velocity[1] * dt, 0.0])
        objects.append(dataclasses.replace(o, center=o.center + shift,
                                           size=o.size.copy(),
                                           velocity=o.velocity.copy(),
                                           appearance=o.appearance.copy()))
    return Scene(objects=objects, rig=scene.rig, timestamp=scene.timestamp + dt,
                 seed=scene.seed)


def wrap_angle(a: float) -> float:
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# fixed deterministic mixers

@functools.lru_cache(maxsize=None)
def _mixer(tag: int, d_out: int, d_in: int) -> np.ndarray:
    rng = np.random.default_rng((tag, d_out, d_in))
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in))


@functools.lru_cache(maxsize=None)
def _grid_pos_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Sinusoidal (h, w, c) cell-position code for painted feature maps."""
    enc = np.zeros((h, w, c))
    half = c // 2
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for i in range(half // 2):
        freq = 1.0 / (30.0 ** (2.0 * i / half))
        enc[:, :, 2 * i] = np.sin(rows * freq)
        enc[:, :, 2 * i + 1] = np.cos(rows * freq)
        enc[:, :, half + 2 * i] = np.sin(cols * freq)
        enc[:, :, half + 2 * i + 1] = np.cos(cols * freq)
    return enc


def _geometry_features(center: np.ndarray, size: np.ndarray, yaw: float,
                       extent: float) -> np.ndarray:
    return np.array([center[0] / extent, center[1] / extent, center[2] / extent,
                     size[0] / 5.0, size[1] / 5.0, size[2] / 5.0,
                     math.sin(yaw), math.cos(yaw)])


# ---------------------------------------------------------------------------
# branch simulators

def simulate_lidar_branch(scene: Scene, scfg: SceneConfig, sim: SimConfig,
                          seed: int) -> tuple[list[Proposal3D], np.ndarray]:
    """Per-object detections with jittered geometry and appearance-coupled
    features, plus false positives and a BEV feature grid keyed to object
    footprints."""
    rng = np.random.default_rng((seed, _S_LIDAR))
    c = sim.feat_dim
    mix = _mixer(_MIX_3D, c, scfg.appearance_dim + 8)
    proposals: list[Proposal3D] = []
    for o in scene.objects:
        if rng.uniform() >= sim.p_det3d:
            continue
        center = o.center + rng.normal(0.0, sim.center_jitter, 3)
        size = np.maximum(o.size * (1.0 + rng.normal(0.0, sim.size_jitter, 3)), 0.1)
        yaw = wrap_angle(o.yaw + rng.normal(0.0, sim.yaw_jitter))
        logits = rng.normal(0.0, sim.logit_noise, scfg.n_classes)
        logits[o.class_id] += sim.logit_margin
        geom = _geometry_features(center, size, yaw, scfg.world_extent)
        feature = np.tanh(mix @ np.concatenate([o.appearance, geom]))
        feature = feature + rng.normal(0.0, sim.feat_noise3d, c)
        proposals.append(Proposal3D(center=center, size=size, yaw=yaw,
                                    class_logits=logits, feature=feature,
                                    src_object=o.id))
    for _ in range(sim.n_fp3d):
        r = rng.uniform(scfg.min_range, scfg.max_range)
        phi = rng.uniform(-math.pi, math.pi)
        size = np.array([rng.uniform(*scfg.length_range),
                         rng.uniform(*scfg.width_range),
                         rng.uniform(*scfg.height_range)])
        center = np.array([r * math.cos(phi), r * math.sin(phi), size[2] / 2.0])
        yaw = rng.uniform(-math.pi, math.pi)
        logits = rng.normal(0.0, sim.logit_noise, scfg.n_classes)
        logits[rng.integers(0, scfg.n_classes)] += sim.logit_margin
        app = rng.normal(0.0, 1.0, scfg.appearance_dim)
        geom = _geometry_features(center, size, yaw, scfg.world_extent)
        feature = np.tanh(mix @ np.concatenate([app, geom]))
        feature = feature + rng.normal(0.0, sim.feat_noise3d, c)
        proposals.append(Proposal3D(center=center, size=size, yaw=yaw,
                                    class_logits=logits, feature=feature,
                                    src_object=None))
    bev = _paint_bev(scene, scfg, sim, rng)
    return proposals, bev


def _bev_cell_centers(extent: float, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(w) + 0.5) / w * (2 * extent) - extent
    ys = (np.arange(h) + 0.5) / h * (2 * extent) - extent
    return xs, ys


def _paint_bev(scene: Scene, scfg: SceneConfig, sim: SimConfig,
               rng: np.random.Generator) -> np.ndarray:
    c = sim.feat_dim
    bev = rng.normal(0.0, sim.bev_bg_noise, (sim.bev_h, sim.bev_w, c))
    mix = _mixer(_MIX_BEV, c, scfg.appearance_dim)
    xs, ys = _bev_cell_centers(scfg.world_extent, sim.bev_h, sim.bev_w)
    gx, gy = np.meshgrid(xs, ys)  # (h, w)
    for o in scene.objects:
        inside = footprint_mask(gx, gy, o.center, o.size, o.yaw)
        rows, cols = np.nonzero(inside)
        if rows.size == 0:
            # make sure each object leaves a footprint in at least one cell
            j = int(np.clip((o.center[0] + scfg.world_extent) / (2 * scfg.world_extent)
                            * sim.bev_w, 0, sim.bev_w - 1))
            i = int(np.clip((o.center[1] + scfg.world_extent) / (2 * scfg.world_extent)
                            * sim.bev_h, 0, sim.bev_h - 1))
            rows, cols = np.array([i]), np.array([j])
        paint = mix @ o.appearance
        bev[rows, cols] = paint + rng.normal(0.0, sim.bev_feat_noise, (rows.size, c))
    return bev


def footprint_mask(gx: np.ndarray, gy: np.ndarray, center: np.ndarray,
                   size: np.ndarray, yaw: float) -> np.ndarray:
    """Boolean mask of grid points inside the rotated ground-plane rectangle."""
    dx = gx - center[0]
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    dy = gy - center[1]
    lx = cy_ * dx + sy_ * dy
    ly = -sy_ * dx + cy_ * dy
    return (np.abs(lx) <= size[0] / 2.0) & (np.abs(ly) <= size[1] / 2.0)


def _grid_box(box: np.ndarray, img_w: int, img_h: int, fw: int, fh: int) -> np.ndarray:
    """Pixel box scaled to feature-grid coordinates."""
    return np.array([box[0] * fw / img_w, box[1] * fh / img_h,
                     box[2] * fw / img_w, box[3] * fh / img_h])


def simulate_camera_branch(scene: Scene, disturb: DisturbanceSpec,
                           scfg: SceneConfig, sim: SimConfig,
                           seed: int) -> tuple[ViewFeatureMap, list[Proposal2D]]:
    """Images observed at the (possibly time-shifted) scene: per-view painted
    feature maps and jittered 2D proposals, then feature corruption, then
    dropped views zeroed last."""
    disturb.validate(scfg.n_views)
    moved = scene_at(scene, disturb.async_dt)
    rng = np.random.default_rng((seed, _S_CAMERA))
    c = sim.feat_dim
    mix = _mixer(_MIX_IMG, c, scfg.appearance_dim)
    posenc = _grid_pos_encoding(sim.fmap_h, sim.fmap_w, c) * sim.posenc_scale
    fmap = rng.normal(0.0, sim.bg_noise, (scfg.n_views, sim.fmap_h, sim.fmap_w, c))
    proposals: list[Proposal2D] = []
    col_centers = (np.arange(sim.fmap_w) + 0.5)
    row_centers = (np.arange(sim.fmap_h) + 0.5)
    n_obj = len(moved.objects)
    if n_obj:
        centers_m = np.stack([o.center for o in moved.objects])
        sizes_m = np.stack([o.size for o in moved.objects])
        yaws_m = np.array([o.yaw for o in moved.objects])
        paints = np.stack([o.appearance for o in moved.objects]) @ mix.T
    for view, cam in enumerate(moved.rig):
        visible = []
        if n_obj:
            boxes_v, valid_v, depth_v = _project_boxes_batch(
                cam, centers_m, sizes_m, yaws_m)
            visible = [(depth_v[i], moved.objects[i], boxes_v[i], i)
                       for i in np.nonzero(valid_v)[0]]
        # paint far-to-near so closer objects overwrite; every cell the box
        # touches is painted so ROI pooling sees the object, not background
        for depth, o, box, oi in sorted(visible, key=lambda t: -t[0]):
            gb = _grid_box(box, scfg.img_w, scfg.img_h, sim.fmap_w, sim.fmap_h)
            c0 = int(np.clip(math.floor(gb[0]), 0, sim.fmap_w - 1))
            c1 = int(np.clip(math.ceil(gb[2]), c0 + 1, sim.fmap_w))
            r0 = int(np.clip(math.floor(gb[1]), 0, sim.fmap_h - 1))
            r1 = int(np.clip(math.ceil(gb[3]), r0 + 1, sim.fmap_h))
            rows = np.arange(r0, r1)
            cols = np.arange(c0, c1)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            fmap[view, rr, cc] = (paints[oi] + posenc[rr, cc]
                                  + rng.normal(0.0, sim.feat_noise2d,
                                               (rows.size, cols.size, c)))
        for depth, o, box, oi in visible:
            if rng.uniform() >= sim.p_det2d:
                continue
            jbox = box + rng.normal(0.0, sim.box_jitter_px, 4)
            jbox = np.array([max(min(jbox[0], jbox[2]), 0.0),
                             max(min(jbox[1], jbox[3]), 0.0),
                             min(max(jbox[0], jbox[2]), float(scfg.img_w)),
                             min(max(jbox[1], jbox[3]), float(scfg.img_h))])
            if jbox[2] <= jbox[0] or jbox[3] <= jbox[1]:
                continue
            proposals.append(Proposal2D(view=view, box=jbox, class_id=o.class_id,
                                        score=float(rng.uniform(0.5, 1.0)),
                                        src_object=o.id))
        for _ in range(sim.n_fp2d):
            x1 = rng.uniform(0, scfg.img_w * 0.9)
            y1 = rng.uniform(0, scfg.img_h * 0.9)
            bw = rng.uniform(8, scfg.img_w * 0.2)
            bh = rng.uniform(8, scfg.img_h * 0.3)
            fbox = np.array([x1, y1, min(x1 + bw, scfg.img_w), min(y1 + bh, scfg.img_h)])
            proposals.append(Proposal2D(view=view, box=fbox,
                                        class_id=int(rng.integers(0, scfg.n_classes)),
                                        score=float(rng.uniform(0.3, 0.9)),
                                        src_object=None))
    if disturb.feat_gain != 1.0 or disturb.feat_noise_amp > 0.0:
        crng = np.random.default_rng((seed, _S_CORRUPT))
        noise = crng.uniform(-disturb.feat_noise_amp, disturb.feat_noise_amp, fmap.shape)
        fmap = disturb.feat_gain * fmap + noise
    if disturb.dropped_views:
        for v in disturb.dropped_views:
            fmap[v] = 0.0
        proposals = [p for p in proposals if p.view not in disturb.dropped_views]
    return ViewFeatureMap(data=fmap), proposals


# ---------------------------------------------------------------------------
# disturbance injectors on the LiDAR side

def apply_misalignment(proposals3d: list[Proposal3D], bev: np.ndarray,
                       rot_deg: float, trans_m: float, extent: float,
                       seed: int = 0,
                       trans_dir_rad: float | None = None
                       ) -> tuple[list[Proposal3D], np.ndarray]:
    """Rigid transform of all 3D proposal geometry (yaw rotation about the
    vertical axis, then a planar translation in a seeded random direction);
    features untouched, BEV resampled nearest-neighbor under the same map."""
    theta = math.radians(rot_deg)
    if trans_dir_rad is None:
        trans_dir_rad = float(np.random.default_rng((seed, _S_MISALIGN))
                              .uniform(0.0, 2.0 * math.pi))
    ct, st = math.cos(theta), math.sin(theta)
    tvec = np.array([trans_m * math.cos(trans_dir_rad),
                     trans_m * math.sin(trans_dir_rad)])
    out = []
    for p in proposals3d:
        x = ct * p.center[0] - st * p.center[1] + tvec[0]
        y = st * p.center[0] + ct * p.center[1] + tvec[1]
        out.append(dataclasses.replace(
            p, center=np.array([x, y, p.center[2]]), size=p.size.copy(),
            yaw=wrap_angle(p.yaw + theta), class_logits=p.class_logits.copy(),
            feature=p.feature.copy()))
    h, w = bev.shape[0], bev.shape[1]
    xs, ys = _bev_cell_centers(extent, h, w)
    gx, gy = np.meshgrid(xs, ys)
    # inverse map target cell centers back into the source grid
    sx = ct * (gx - tvec[0]) + st * (gy - tvec[1])
    sy = -st * (gx - tvec[0]) + ct * (gy - tvec[1])
    ci = (sx + extent) / (2 * extent) * w - 0.5
    ri = (sy + extent) / (2 * extent) * h - 0.5
    ci_n = np.rint(ci).astype(int)
    ri_n = np.rint(ri).astype(int)
    valid = (ci_n >= 0) & (ci_n < w) & (ri_n >= 0) & (ri_n < h)
    new_bev = np.zeros_like(bev)
    rr, cc = np.nonzero(valid)
    new_bev[rr, cc] = bev[ri_n[rr, cc], ci_n[rr, cc]]
    return out, new_bev


def perturb_calibration(rig: list[CameraModel], trans_range_m: float,
                        rot_range_deg: float, seed: int) -> list[CameraModel]:
    """Independent uniform extrinsic perturbations per camera; intrinsics kept."""
    if trans_range_m < 0 or rot_range_deg < 0:
        raise ConfigError("perturbation ranges must be >= 0")
    rng = np.random.default_rng((seed, _S_CALIB))
    out = []
    for cam in rig:
        dt = rng.uniform(-trans_range_m, trans_range_m, 3)
        dyaw = math.radians(rng.uniform(-rot_range_deg, rot_range_deg))
        cd, sd = math.cos(dyaw), math.sin(dyaw)
        rz = np.array([[cd, -sd, 0.0], [sd, cd, 0.0], [0.0, 0.0, 1.0]])
        out.append(dataclasses.replace(cam, R=cam.R @ rz, t=cam.t + dt))
    return out


# ---------------------------------------------------------------------------
# ground-truth correspondences

@dataclass
class GroundTruth:
    """Per-3D-proposal view labels and per-view one-hot match matrices."""

    view_label_sets: list[list[int]]
    view_labels: np.ndarray  # dominant view, or n_views for "no view"
    match_matrices: list[np.ndarray]  # per view: (n3d, n2d_in_view + 1)
    view_groups: list[list[int]]  # per view: indices into the flat 2D list


def group_by_view(proposals2d: list[Proposal2D], n_views: int) -> list[list[int]]:
    groups: list[list[int]] = [[] for _ in range(n_views)]
    for j, p in enumerate(proposals2d):
        groups[p.view].append(j)
    return groups


def make_gt_correspondences(scene: Scene, proposals3d: list[Proposal3D],
                            proposals2d: list[Proposal2D],
                            rig: list[CameraModel],
                            camera_dt: float = 0.0) -> GroundTruth:
    """View labels by projecting each proposal's source object (at camera
    time) with the true rig; match matrices by joining src_object ids per
    view, with the extra null column for unmatched rows."""
    n_views = len(rig)
    obj_pos = {o.id: o.center + np.array([o.velocity[0] * camera_dt,
                                          o.velocity[1] * camera_dt, 0.0])
               for o in scene.objects}
    label_sets: list[list[int]] = []
    labels = np.full(len(proposals3d), n_views, dtype=np.intp)
    for i, p in enumerate(proposals3d):
        ref = obj_pos.get(p.src_object, p.center) if p.src_object is not None else p.center
        views = []
        best, best_d = n_views, math.inf
        for v, cam in enumerate(rig):
            u, vv, z = project_point(cam, ref)
            if z > 0 and 0.0 <= u <= cam.img_w and 0.0 <= vv <= cam.img_h:
                views.append(v)
                d = math.hypot(u - cam.img_w / 2.0, vv - cam.img_h / 2.0)
                if d < best_d:
                    best, best_d = v, d
        label_sets.append(views)
        labels[i] = best
    groups = group_by_view(proposals2d, n_views)
    matrices = []
    for v in range(n_views):
        cols = groups[v]
        m = np.zeros((len(proposals3d), len(cols) + 1))
        for i, p in enumerate(proposals3d):
            hit = None
            if p.src_object is not None:
                for local_j, j in enumerate(cols):
                    if proposals2d[j].src_object == p.src_object:
                        hit = local_j
                        break
            m[i, hit if hit is not None else len(cols)] = 1.0
        matrices.append(m)
    return GroundTruth(view_label_sets=label_sets, view_labels=labels,
                       match_matrices=matrices, view_groups=groups)


# ---------------------------------------------------------------------------
# serialization

def _camera_to_dict(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R": cam.R.tolist(), "t": cam.t.tolist(),
            "img_w": cam.img_w, "img_h": cam.img_h}


def _camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                       R=np.array(d["R"]), t=np.array(d["t"]),
                       img_w=d["img_w"], img_h=d["img_h"])


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "timestamp": scene.timestamp,
        "rig": [_camera_to_dict(c) for c in scene.rig],
        "objects": [{
            "id": o.id, "class_id": o.class_id, "center": o.center.tolist(),
            "size": o.size.tolist(), "yaw": o.yaw,
            "velocity": o.velocity.tolist(), "appearance": o.appearance.tolist(),
        } for o in scene.objects],
    }


def scene_from_dict(d: dict) -> Scene:
    objects = [SceneObject(id=o["id"], class_id=o["class_id"],
                           center=np.array(o["center"]), size=np.array(o["size"]),
                           yaw=o["yaw"], velocity=np.array(o["velocity"]),
                           appearance=np.array(o["appearance"]))
               for o in d["objects"]]
    return Scene(objects=objects, rig=[_camera_from_dict(c) for c in d["rig"]],
                 timestamp=d["timestamp"], seed=d["seed"])


def write_scenes_jsonl(path: str | Path, scenes: list[Scene],
                       config: SceneConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"format_version": SCENES_FORMAT_VERSION, "kind": "scenes",
                  "n": len(scenes), "config": to_dict(config)}
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for s in scenes:
            f.write(json.dumps(scene_to_dict(s), sort_keys=True,
                               separators=(",", ":")) + "\n")


def read_scenes_jsonl(path: str | Path) -> tuple[list[Scene], SceneConfig]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines:
        raise ValueError(f"{path}: empty scene file")
    header = json.loads(lines[0])
    if header.get("format_version") != SCENES_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version "
                         f"{header.get('format_version')!r}")
    cfg = scene_config_from_dict(header["config"])
    return [scene_from_dict(json.loads(ln)) for ln in lines[1:]], cfg
