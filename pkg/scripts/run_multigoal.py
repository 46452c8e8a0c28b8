"""Train on the multi-goal task for several seeds and summarise success.

Each seed gets its own run directory under --out; the summary lists the
final greedy success rate and which goals a 5x5 grid of starts reaches.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fmer.agent import grid_starts, run_training
from fmer.config import apply_overrides, preset


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--preset", default="multigoal-desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="runs/multigoal")
    args = p.parse_args()

    summary = []
    for seed in args.seeds:
        cfg = apply_overrides(preset(args.preset, seed=seed), args.set).validate()
        log = run_training(cfg, run_dir=Path(args.out) / f"seed{seed}", progress=True)
        grid = log.trainer.evaluate(25, starts=grid_starts())
        final = [r for r in log.rows if "eval_success" in r][-1]
        summary.append({
            "seed": seed,
            "final_success": final["eval_success"],
            "grid_goal_counts": grid.goal_counts,
        })
        print(json.dumps(summary[-1]))
    print("mean final success:", np.mean([s["final_success"] for s in summary]))


if __name__ == "__main__":
    main()
