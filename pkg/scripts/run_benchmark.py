"""End-to-end benchmark protocol: generate train/held-out scenes, train the
matcher + fusion model, evaluate clean, sweep the disturbance grid against
the projection baseline, render charts, and run the ablations.

Everything goes through the CLI so the artifacts match what `boxmatch`
produces by hand. Use --fast for a small smoke-scale run.
"""

import argparse
import sys
import time
from pathlib import Path

from boxmatch.benchcli import main as cli

TRAIN_SEED = 1000
HELD_SEED = 100000
MODEL_SEED = 7


def run(n_train: int, n_held: int, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes = out_dir / "train_scenes.jsonl"
    held_scenes = out_dir / "held_scenes.jsonl"
    ckpt = out_dir / "checkpoint.json"
    steps = [
        ["gen", "--n", str(n_train), "--seed", str(TRAIN_SEED),
         "--out", str(train_scenes)],
        ["gen", "--n", str(n_held), "--seed", str(HELD_SEED),
         "--out", str(held_scenes)],
        ["train", "--scenes", str(train_scenes), "--seed", str(MODEL_SEED),
         "--out", str(ckpt)],
        ["eval", "--ckpt", str(ckpt), "--scenes", str(held_scenes),
         "--disturb", "clean", "--out", str(out_dir / "report_clean.json")],
        ["sweep", "--ckpt", str(ckpt), "--scenes", str(held_scenes),
         "--out", str(out_dir / "sweep.csv")],
        ["report", "--csv", str(out_dir / "sweep.csv"),
         "--out-dir", str(out_dir / "charts")],
        ["ablate", "--ckpt", str(ckpt), "--scenes", str(held_scenes),
         "--out", str(out_dir / "ablations.csv")],
    ]
    for argv in steps:
        t0 = time.time()
        print(f"$ boxmatch {' '.join(argv)}")
        rc = cli(argv)
        if rc != 0:
            print(f"step failed with exit code {rc}", file=sys.stderr)
            return rc
        print(f"  ({time.time() - t0:.1f}s)")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="benchmark_out")
    parser.add_argument("--fast", action="store_true",
                        help="small run: 200 train / 40 held-out scenes")
    args = parser.parse_args()
    if args.fast:
        sys.exit(run(200, 40, Path(args.out_dir)))
    sys.exit(run(2000, 200, Path(args.out_dir)))
