"""Weighting-mode and entropy ablations on the multi-goal task.

Writes one success-rate curve per variant to --out/curves.json.
"""

import argparse
import json
from pathlib import Path

from fmer.agent import run_training
from fmer.config import preset

VARIANTS = {
    "softmax": dict(),
    "top1": dict(weighting_mode="top1"),
    "unnormalized": dict(weighting_mode="unnormalized"),
    "entropy_off": dict(entropy_off_after=0),
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--preset", default="multigoal-desk")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()

    out = Path(args.out)
    curves = {}
    for name in args.variants:
        curves[name] = {}
        for seed in args.seeds:
            cfg = preset(args.preset, seed=seed, **VARIANTS[name])
            log = run_training(cfg, run_dir=out / name / f"seed{seed}")
            curves[name][seed] = [(r["step"], r["eval_success"]) for r in log.rows if "eval_success" in r]
            print(name, seed, curves[name][seed][-1])
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.json").write_text(json.dumps(curves, indent=2))


if __name__ == "__main__":
    main()
