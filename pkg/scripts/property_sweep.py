"""Train on the base splits and on base + long-tail + robust, compare generality.

Reuses the LM and dataset of an existing run directory and retrains the editor
network for each seed with a shortened curriculum.

    python scripts/property_sweep.py runs/seed0 --seeds 0 1 2
"""
import argparse
import csv
import json
import shutil
import statistics
from pathlib import Path

from dafnet.cli import main

ARMS = {"base": ["recent", "popular"], "full": ["recent", "popular", "long_tail", "robust"]}
TRAIN = {"t_max": 10, "i_inc": 100, "tail_iters": 300, "i_max": 1500, "checkpoint_every": 50}


def run_arm(src: Path, dst: Path, splits: list[str], seed: int, edits: int) -> dict:
    dst.mkdir(parents=True, exist_ok=True)
    for f in ("lm.ckpt", "dataset.jsonl"):
        shutil.copy(src / f, dst / f)
    cfg = dst / "cfg.json"
    cfg.write_text(json.dumps({"train": TRAIN, "train_splits": splits,
                               "eval": {"edits": edits, "checkpoints": [edits]}}))
    for cmd in ("train", "eval"):
        if main([cmd, "--config", str(cfg), "--seed", str(seed), "--out", str(dst)]) != 0:
            raise SystemExit(f"{cmd} failed in {dst}")
    row = list(csv.DictReader(open(dst / "metrics.csv")))[-1]
    return {k: float(row[k]) for k in ("rel", "gen", "loc")}


def cli() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", type=Path, help="directory holding lm.ckpt and dataset.jsonl")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--edits", type=int, default=10)
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = ap.parse_args()
    table = {arm: [] for arm in ARMS}
    for seed in args.seeds:
        for arm, splits in ARMS.items():
            m = run_arm(args.run, args.out / f"{arm}{seed}", splits, seed, args.edits)
            table[arm].append(m)
            print(f"seed {seed} {arm:4s} rel {m['rel']:.3f} gen {m['gen']:.3f} loc {m['loc']:.3f}", flush=True)
    for arm, rows in table.items():
        print(f"{arm:4s} mean gen@{args.edits} {statistics.mean(r['gen'] for r in rows):.3f}")


if __name__ == "__main__":
    cli()
