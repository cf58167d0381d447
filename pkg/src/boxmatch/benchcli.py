"""Benchmark CLI: scene generation, training, evaluation, disturbance sweeps
with a projection baseline for contrast, ablations, and SVG degradation
reports. Identical arguments, inputs, and seeds produce identical bytes."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline, trainloop
from .config import (SceneConfig, TrainConfig, load_json,
                     scene_config_from_dict, to_dict, train_config_from_dict)
from .worldsim import (DisturbanceSpec, generate_scene, read_scenes_jsonl,
                       write_scenes_jsonl)

CSV_COLUMNS = [
    "point", "matcher", "n_scenes", "n_proposals",
    "view_top1_acc", "view_top2_acc",
    "match_precision", "match_recall", "match_f1",
    "no_view_rate", "bev_iou", "class_acc", "detection_score",
    "loss_total", "loss_det", "loss_view", "loss_pro",
]

ABLATE_COLUMNS = ["mode", "view_top1_acc", "view_top2_acc", "match_precision",
                  "match_recall", "match_f1", "detection_score"]

# corruption amplitude is twice the nominal unit standard deviation of
# painted features
FEAT_NOISE_AMP = 2.0

MISALIGN_LEVELS = {"small": (1.5, 0.15), "medium": (3.0, 0.30),
                   "large": (5.0, 0.50)}
ASYNC_TIMES = (0.08, 0.25, 0.50, 1.00, 2.00)


def named_disturbances(n_views: int) -> dict[str, DisturbanceSpec]:
    """The benchmark grid: asynchronous sensing, misaligned placement,
    dropped views, feature corruption, calibration perturbation, and the
    combined levels."""
    points = {"clean": DisturbanceSpec()}
    for dt in ASYNC_TIMES:
        points[f"async_{dt:.2f}"] = DisturbanceSpec(async_dt=dt)
    for name, (rot, trans) in MISALIGN_LEVELS.items():
        points[f"misalign_{name}"] = DisturbanceSpec(misalign_rot_deg=rot,
                                                     misalign_trans_m=trans)
    for count in (1, max(n_views // 2, 1), n_views):
        views = frozenset(range(0, n_views, max(n_views // count, 1)))
        views = frozenset(sorted(views)[:count])
        points[f"drop_{count}"] = DisturbanceSpec(dropped_views=views)
    points["noise_dark"] = DisturbanceSpec(feat_gain=0.5,
                                           feat_noise_amp=FEAT_NOISE_AMP)
    points["noise_bright"] = DisturbanceSpec(feat_gain=2.0,
                                             feat_noise_amp=FEAT_NOISE_AMP)
    points["calib"] = DisturbanceSpec(calib_trans_range_m=0.5,
                                      calib_rot_range_deg=30.0)
    small_rot, small_trans = MISALIGN_LEVELS["small"]
    for level, dt in enumerate(ASYNC_TIMES[:3], start=1):
        points[f"multi_{level}"] = DisturbanceSpec(
            async_dt=dt, misalign_rot_deg=small_rot,
            misalign_trans_m=small_trans)
    return points


def report_axes(n_views: int) -> dict[str, list[tuple[float, str]]]:
    """Chart axes: (numeric level, grid point name) per disturbance family;
    clean is the zero level where a zero level makes sense."""
    drops = sorted({1, max(n_views // 2, 1), n_views})
    return {
        "async": [(0.0, "clean")] + [(dt, f"async_{dt:.2f}") for dt in ASYNC_TIMES],
        "misalign": [(0.0, "clean")] + [
            (MISALIGN_LEVELS[nm][0], f"misalign_{nm}") for nm in
            ("small", "medium", "large")],
        "drop": [(0.0, "clean")] + [(float(k), f"drop_{k}") for k in drops],
        "noise": [(0.5, "noise_dark"), (1.0, "clean"), (2.0, "noise_bright")],
        "multi": [(0.0, "clean")] + [(float(lv), f"multi_{lv}")
                                     for lv in (1, 2, 3)],
    }


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _resolve_seed(args) -> int:
    env = os.environ.get("BOXMATCH_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _load_disturbance(spec: str, n_views: int) -> DisturbanceSpec:
    points = named_disturbances(n_views)
    if spec in points:
        return points[spec]
    if Path(spec).exists():
        return DisturbanceSpec.from_dict(load_json(spec))
    raise ValueError(f"unknown disturbance {spec!r}: not a grid point name "
                     f"({', '.join(sorted(points))}) or a JSON file")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    seed = _resolve_seed(args)
    cfg = (scene_config_from_dict(load_json(args.config))
           if args.config else SceneConfig())
    scenes = [generate_scene(cfg, seed=seed + i) for i in range(args.n)]
    try:
        write_scenes_jsonl(args.out, scenes, cfg)
    except OSError as e:
        raise RuntimeError(f"cannot write scenes to {args.out}: {e}") from e
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    import dataclasses

    scenes, scene_cfg = read_scenes_jsonl(args.scenes)
    cfg = (train_config_from_dict(load_json(args.config))
           if args.config else TrainConfig())
    # the scene file's world config is authoritative for this run
    cfg = dataclasses.replace(cfg, scene=scene_cfg)
    env = os.environ.get("BOXMATCH_SEED")
    if env is not None:
        cfg = dataclasses.replace(cfg, seed=int(env))
    elif args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    store, history = trainloop.train(cfg, scenes, log=print)
    trainloop.save_model(args.out, store, cfg)
    print(f"wrote checkpoint to {args.out} "
          f"({store.n_scalars()} parameters, {len(history)} epochs)")
    return 0


def cmd_eval(args) -> int:
    store, cfg = trainloop.load_model(args.ckpt)
    scenes, _ = read_scenes_jsonl(args.scenes)
    disturb = _load_disturbance(args.disturb, cfg.scene.n_views)
    report = trainloop.evaluate(store, cfg, scenes, disturb,
                                lidar_only=args.lidar_only,
                                topk=args.topk, one_level=args.one_level)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.dump:
        trainloop.dump_scene_outputs(store, cfg, scenes, disturb, args.dump)
    print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    store, cfg = trainloop.load_model(args.ckpt)
    scenes, _ = read_scenes_jsonl(args.scenes)
    points = named_disturbances(cfg.scene.n_views)
    if args.points:
        names = args.points.split(",")
        unknown = [n for n in names if n not in points]
        if unknown:
            raise ValueError(f"unknown grid points: {unknown}")
        points = {n: points[n] for n in names}
    rows = []
    for name in sorted(points):
        disturb = points[name]
        rep = trainloop.evaluate(store, cfg, scenes, disturb)
        row = {"point": name, "matcher": "fbm"}
        row.update(json.loads(rep.to_json()))
        rows.append(row)
        base = baseline.evaluate_baseline(cfg, scenes, disturb)
        rows.append({"point": name, "matcher": "baseline", **base})
    rows.sort(key=lambda r: (r["point"], r["matcher"]))
    _write_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    store, cfg = trainloop.load_model(args.ckpt)
    scenes, _ = read_scenes_jsonl(args.scenes)
    clean = DisturbanceSpec()
    modes = {
        "topk_1": dict(topk=1),
        "topk_2": dict(topk=2),
        "one_level": dict(one_level=True),
        "two_level": dict(one_level=False),
    }
    rows = []
    for mode in sorted(modes):
        rep = trainloop.evaluate(store, cfg, scenes, clean, **modes[mode])
        data = json.loads(rep.to_json())
        rows.append({"mode": mode, **{k: data[k] for k in ABLATE_COLUMNS[1:]}})
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def _write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()
                             if k in CSV_COLUMNS})


def _read_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for ln, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ValueError(f"{path}:{ln}: malformed CSV row")
            rows.append(row)
        return rows


def cmd_report(args) -> int:
    if args.format != "svg":
        raise ValueError(f"unsupported report format {args.format!r}")
    rows = _read_csv(args.csv)
    by_key = {(r["point"], r["matcher"]): r for r in rows}
    n_views = args.n_views
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"metric": "match_f1", "axes": {}}
    written = []
    for axis, levels in report_axes(n_views).items():
        series: dict[str, list[tuple[float, float]]] = {}
        axis_summary = {}
        for level, point in levels:
            entry = {}
            for matcher in ("fbm", "baseline"):
                row = by_key.get((point, matcher))
                if row is None or row["match_f1"] == "":
                    continue
                value = float(row["match_f1"])
                series.setdefault(matcher, []).append((level, value))
                entry[matcher] = value
            if entry:
                axis_summary[point] = entry
        if not series:
            continue
        svg_path = out_dir / f"{axis}.svg"
        _render_line_chart(svg_path, title=f"match F1 vs {axis}",
                           x_label=axis, y_label="match_f1", series=series)
        summary["axes"][axis] = axis_summary
        written.append(svg_path.name)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {', '.join(written)} and summary.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# SVG rendering (hand-rolled so bytes are reproducible)

_SVG_W, _SVG_H = 480, 320
_ML, _MR, _MT, _MB = 56, 16, 28, 44
_SERIES_COLORS = {"fbm": "#1f77b4", "baseline": "#d62728"}


def _render_line_chart(path, title: str, x_label: str, y_label: str,
                       series: dict[str, list[tuple[float, float]]]) -> None:
    xs = [x for pts in series.values() for x, _ in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = 0.0, 1.0
    plot_w = _SVG_W - _ML - _MR
    plot_h = _SVG_H - _MT - _MB

    def px(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return _MT + (y_hi - y) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W // 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
        f'<line x1="{_ML}" y1="{_MT + plot_h}" x2="{_ML + plot_w}" '
        f'y2="{_MT + plot_h}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + plot_h}" '
        f'stroke="black"/>',
        f'<text x="{_ML + plot_w // 2}" y="{_SVG_H - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{x_label}</text>',
        f'<text x="14" y="{_MT + plot_h // 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {_MT + plot_h // 2})">{y_label}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        parts.append(f'<line x1="{_ML - 4}" y1="{y:.2f}" x2="{_ML}" '
                     f'y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{y + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{frac}</text>')
    legend_y = _MT + 8
    for name in sorted(series):
        pts = sorted(series[name])
        color = _SERIES_COLORS.get(name, "#333333")
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                         f'fill="{color}" data-x="{repr(x)}" '
                         f'data-y="{repr(y)}" data-series="{name}"/>')
        parts.append(f'<rect x="{_ML + plot_w - 92}" y="{legend_y - 8}" '
                     f'width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{_ML + plot_w - 78}" y="{legend_y + 1}" '
                     f'font-family="sans-serif" font-size="10">{name}</text>')
        legend_y += 16
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxmatch",
        description="Synthetic multi-view benchmark for calibration-free "
                    "proposal fusion by learned box matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a scene JSONL file")
    p.add_argument("--config", help="SceneConfig JSON file")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train matching + fusion parameters")
    p.add_argument("--scenes", required=True, help="scene JSONL file")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a disturbance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--disturb", default="clean",
                   help="grid point name or DisturbanceSpec JSON file")
    p.add_argument("--out", required=True, help="EvalReport JSON path")
    p.add_argument("--lidar-only", action="store_true")
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--one-level", action="store_true")
    p.add_argument("--dump", help="write per-scene assignments, matches, and "
                                  "predictions as JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the disturbance grid for both matchers")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--points", help="comma-separated grid point names")
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="top-K and matching-level ablations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="ablation CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render degradation charts from a sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", default="svg")
    p.add_argument("--n-views", type=int, default=6)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # surfaced as exit code 1 with context
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
