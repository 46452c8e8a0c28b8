"""Command-line entry point: ``fmer train|eval|plotdata``.

Exit codes: 0 ok, 2 bad configuration, 3 resume mismatch, 4 bad artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .agent import (
    METRICS_COLUMNS,
    ResumeMismatch,
    Trainer,
    grid_starts,
    run_training,
)
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig
from .envs import q_landscape
from .critic import best_candidate
from .flowpolicy import euler_path

EXIT_CONFIG = 2
EXIT_RESUME = 3
EXIT_ARTIFACT = 4

PLOT_KINDS = ("curves", "qgrid", "trajectories")


def load_config(config_path=None, preset_name=None, overrides=()) -> TrainConfig:
    """Preset, then file values, then ``--set`` overrides; validated."""
    base = cfgmod.preset(preset_name) if preset_name else TrainConfig()
    if config_path is not None:
        base = cfgmod.parse(Path(config_path).read_text(), base)
    return cfgmod.apply_overrides(base, list(overrides)).validate()


def default_run_dir(root: Path, config: TrainConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return root / f"{config.env_name}-seed{config.seed}-{stamp}"


def cmd_train(args) -> int:
    try:
        config = load_config(args.config, args.preset, args.set or [])
    except ConfigError as exc:
        print(f"config error [{exc.key or '?'}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trainer = None
    if args.resume:
        try:
            trainer = Trainer.load(args.resume, config)
        except ResumeMismatch as exc:
            print(f"resume mismatch: {exc}", file=sys.stderr)
            return EXIT_RESUME
        except CheckpointError as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_ARTIFACT
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(Path(args.out), config)
    log = run_training(config, run_dir=run_dir, trainer=trainer, progress=args.verbose)
    print(f"run directory: {run_dir}")
    if log.checkpoints:
        print(f"last checkpoint: {log.checkpoints[-1]}")
    return 0


def _eval_summary(trainer: Trainer, episodes: int, seed: int) -> dict:
    ev = trainer.evaluate(episodes, seed=seed)
    return ev.to_json()


def cmd_eval(args) -> int:
    try:
        trainer = Trainer.load(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ARTIFACT
    summary = _eval_summary(trainer, args.episodes, args.seed)
    if args.episodes > 0:
        print(f"episodes {summary['episodes']}  return {summary['return_mean']:.3f} +- "
              f"{summary['return_std']:.3f}  success {summary['success_rate']:.2f}")
        if summary["goal_histogram"]:
            print("goal captures: " + " ".join(str(c) for c in summary["goal_histogram"]))
    else:
        print("episodes 0")
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------


def smooth_curves(rows: list[dict[str, str]], window: int) -> list[dict[str, str]]:
    """Trailing moving average over the non-empty values of each numeric column."""
    out = [dict(r) for r in rows]
    for col in METRICS_COLUMNS:
        if col in ("step", "wall_seconds"):
            continue
        recent: list[float] = []
        for src, dst in zip(rows, out):
            raw = src.get(col, "")
            if raw == "":
                continue
            recent.append(float(raw))
            recent = recent[-window:]
            dst[col] = repr(float(np.mean(recent)))
    return out


def plot_curves(run_dir: Path, out: Path, window: int) -> Path:
    with open(run_dir / "metrics.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = list(reader)
    dest = out / "curves.csv"
    with open(dest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(smooth_curves(rows, window))
    return dest


def plot_qgrid(trainer: Trainer, out: Path, grid_n: int, state) -> Path:
    grid = q_landscape(trainer.env, trainer.critics, state, grid_n)
    dest = out / "qgrid.csv"
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a1", "a2", "q"])
        for a1, a2, q in grid:
            writer.writerow([repr(float(a1)), repr(float(a2)), repr(float(q))])
    return dest


def trajectory_data(trainer: Trainer, states: np.ndarray, n_candidates: int, seed: int) -> dict:
    """Euler latent paths of every candidate and the selected action per state."""
    c = trainer.config
    rng = np.random.default_rng(seed)
    d = trainer.actor.action_dim
    records = []
    for s in np.atleast_2d(states):
        x0 = rng.standard_normal((n_candidates, d))
        srep = np.repeat(s[None, :], n_candidates, axis=0)
        path = euler_path(trainer.actor, srep, x0, c.ode_steps)
        actions = np.tanh(path[-1])
        q = trainer.critics.min_q(srep, actions, target=False)
        best = int(best_candidate(q))
        records.append({
            "state": s.tolist(),
            "paths": np.transpose(path, (1, 0, 2)).tolist(),
            "actions": actions.tolist(),
            "q": q.tolist(),
            "selected": best,
            "arrow": actions[best].tolist(),
        })
    return {"ode_steps": c.ode_steps, "candidates": n_candidates, "states": records}


def cmd_plotdata(args) -> int:
    if args.kind not in PLOT_KINDS:
        print(f"unknown kind {args.kind!r}; choose from {PLOT_KINDS}", file=sys.stderr)
        return EXIT_CONFIG
    path = Path(args.path)
    if args.kind == "curves":
        run_dir = path if path.is_dir() else path.parent.parent
        if not (run_dir / "metrics.csv").exists():
            print(f"{run_dir}: no metrics.csv", file=sys.stderr)
            return EXIT_ARTIFACT
        out = Path(args.out) if args.out else run_dir / "plotdata"
        out.mkdir(parents=True, exist_ok=True)
        print(plot_curves(run_dir, out, args.window))
        return 0

    ckpt_path = path
    if path.is_dir():
        found = sorted((path / "checkpoints").glob("*.fmer"))
        if not found:
            print(f"{path}: no checkpoints", file=sys.stderr)
            return EXIT_ARTIFACT
        ckpt_path = found[-1]
    try:
        trainer = Trainer.load(ckpt_path)
    except (CheckpointError, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ARTIFACT
    out = Path(args.out) if args.out else ckpt_path.parent.parent / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    state = np.zeros(trainer.env.state_dim)
    if args.kind == "qgrid":
        try:
            print(plot_qgrid(trainer, out, args.grid_n, state))
        except ValueError as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_CONFIG
        return 0
    if trainer.env.state_dim == 2:
        starts = grid_starts(args.states_n)
    else:
        starts = np.zeros((1, trainer.env.state_dim))
    data = trajectory_data(trainer, starts, trainer.config.candidates, args.seed)
    dest = out / "trajectories.json"
    dest.write_text(json.dumps(data))
    print(dest)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmer")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one field (repeatable)")
    t.add_argument("--out", default="runs", help="parent directory for the run directory")
    t.add_argument("--run-dir", help="exact run directory (overrides --out naming)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", help="write the summary here instead of stdout")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("plotdata", help="export plot-ready data")
    d.add_argument("path", help="run directory or checkpoint")
    d.add_argument("--kind", required=True)
    d.add_argument("--out")
    d.add_argument("--window", type=int, default=10, help="curves smoothing window")
    d.add_argument("--grid-n", type=int, default=21, help="qgrid resolution per action axis")
    d.add_argument("--states-n", type=int, default=5, help="trajectories start-state grid per axis")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
