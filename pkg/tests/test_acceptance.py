"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria share session-scoped runs of the desk preset, so the
whole file takes on the order of an hour and a half on one core.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fmer import autodiff as ad
from fmer.agent import Trainer, fit_behavior_cloning, grid_starts, run_training
from fmer.autodiff import Tape
from fmer.config import preset
from fmer.critic import CriticPair, critic_loss
from fmer.entropy import entropy_estimate, entropy_loss, hutchinson_divergence, rademacher, tanh_divergence_identity_check
from fmer.envs import StubField
from fmer.flowpolicy import advantage_weights, cfm_loss, sample_candidates, wcfm_loss
from fmer.networks import VectorFieldNet

from conftest import ACCEPTANCE_LINES, central_diff_grad, rel_error

SEEDS = [0, 1, 2, 3, 4]
ABLATION_SEEDS = [0, 1, 2]
FINAL_EVAL_EPISODES = 50


def report(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    return ok


# -- oracle criteria -----------------------------------------------------------


def _fd_cases(rng):
    """Yield (name, loss_fn, params) for small random problems."""
    for k in range(25):
        d, ds, b = 1 + k % 3, 1 + k % 2, 3
        net = VectorFieldNet(d, ds, rng, hidden=5, n_hidden=2, out_scale=1.0)
        s, a = rng.standard_normal((b, ds)), np.tanh(rng.standard_normal((b, d)))
        x0, t = rng.standard_normal((b, d)), rng.uniform(size=b)
        yield "cfm", net, (lambda net=net, s=s, a=a, x0=x0, t=t: cfm_loss(net, s, a, None, x0, t))

        cands = sample_candidates(net, s, 3, 4, rng)
        cands.weights = advantage_weights(rng.standard_normal((b, 3)), 0.5)
        x0w, tw = rng.standard_normal((3 * b, d)), rng.uniform(size=3 * b)
        yield "wcfm", net, (lambda net=net, c=cands, x0=x0w, t=tw: wcfm_loss(net, c, None, x0, t))

        pair = CriticPair.create(ds, d, rng, hidden=5, n_hidden=2)
        y = rng.standard_normal(b)
        yield "critic", pair, (lambda pair=pair, s=s, a=a, y=y: critic_loss(pair, s, a, y))

        eps = rademacher((b, d), rng)
        x = rng.standard_normal((b, d))
        yield "entropy", net, (lambda net=net, x=x, t=t, s=s, e=eps: entropy_loss(net, x, t, s, eps=e))


def _grad_of(model, fn):
    if isinstance(model, CriticPair):
        with Tape() as tape, model.q1.tracked(tape) as p1, model.q2.tracked(tape) as p2:
            return ad.grad(fn(), p1 + p2), model.q1.params + model.q2.params
    with Tape() as tape, model.tracked(tape) as ps:
        return ad.grad(fn(), ps), model.params


def test_ac1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, n = {}, 0
    for name, model, fn in _fd_cases(rng):
        g, params = _grad_of(model, fn)
        fd = central_diff_grad(lambda: fn().item(), params, h=1e-5)
        worst[name] = max(worst.get(name, 0.0), rel_error(g, fd))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = n >= 100 and max(worst.values()) < 1e-4 and elapsed < 60
    detail = f"{n} cases, worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert report("AC-1", ok, detail)


def test_ac2_hutchinson_exactness():
    import itertools

    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for d in (1, 2, 3, 4):
        for _ in range(5):
            net = VectorFieldNet(d, 2, rng, hidden=16, n_hidden=2, out_scale=1.0)
            x, t, s = rng.standard_normal(d), rng.uniform(), rng.standard_normal(2)
            probes = np.array(list(itertools.product([-1.0, 1.0], repeat=d)))
            est = hutchinson_divergence(net, x[None, :], t, s, probes=len(probes), eps=probes[:, None, :]).data[0]
            exact = ad.exact_jacobian_trace(lambda z: net(z, t, s), x).item()
            worst = max(worst, abs(est - exact))
    net = VectorFieldNet(8, 2, rng, hidden=32, n_hidden=2, out_scale=1.0)
    x, t, s = rng.standard_normal(8), 0.4, rng.standard_normal(2)
    n_probes = 10_000
    vals = hutchinson_divergence(net, np.repeat(x[None, :], n_probes, 0), t, s, rng=rng).data
    exact8 = ad.exact_jacobian_trace(lambda z: net(z, t, s), x).item()
    se = vals.std(ddof=1) / math.sqrt(n_probes)
    z = abs(vals.mean() - exact8) / se
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and z < 3 and elapsed < 60
    assert report("AC-2", ok, f"enumeration worst |err| {worst:.1e}; d=8 |err|/se = {z:.2f}; {elapsed:.1f}s")


def test_ac3_action_space_divergence_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    bound = math.atanh(0.999)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 5))
        net = VectorFieldNet(d, 2, rng, hidden=12, n_hidden=2, out_scale=1.0)
        x = rng.uniform(-bound, bound, size=d)
        lhs, rhs = tanh_divergence_identity_check(net, x, rng.uniform(), rng.standard_normal(2))
        worst = max(worst, abs(lhs - rhs))
    elapsed = time.perf_counter() - t0
    assert report("AC-3", worst < 1e-5 and elapsed < 60, f"50 nets, worst |lhs - rhs| {worst:.2e}; {elapsed:.1f}s")


def test_ac4_entropy_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    lin = entropy_estimate(StubField.linear(np.array([[0.5]])), np.zeros((10_000, 1)), 100, rng)
    trans = entropy_estimate(StubField.constant(np.array([0.7])), np.zeros((10_000, 1)), 100, rng)
    err_lin = abs(lin.h1_latent_estimate - 1.918939)
    err_trans = abs(trans.h1_latent_estimate - trans.h0_latent)
    elapsed = time.perf_counter() - t0
    ok = err_lin <= 0.05 and err_trans < 0.02 and elapsed < 60
    assert report("AC-4", ok, f"linear H1 {lin.h1_latent_estimate:.4f} (err {err_lin:.4f}); "
                              f"translation |H1 - H0| {err_trans:.1e}; {elapsed:.1f}s")


def test_ac9_behavior_cloning_two_modes():
    t0 = time.perf_counter()
    rng = np.random.default_rng(909)
    actions = rng.choice([-0.8, 0.8], size=(4096, 1))
    net = VectorFieldNet(1, 1, rng, hidden=64, n_hidden=3)
    fit_behavior_cloning(net, np.zeros((4096, 1)), actions, 1500, 256, 1e-3, rng)
    a = sample_candidates(net, np.zeros((1, 1)), 10_000, 10, rng).actions.ravel()
    lo, hi = np.mean(np.abs(a + 0.8) < 0.15), np.mean(np.abs(a - 0.8) < 0.15)
    elapsed = time.perf_counter() - t0
    ok = lo >= 0.3 and hi >= 0.3 and elapsed < 120
    assert report("AC-9", ok, f"mass near -0.8 {lo:.3f}, near +0.8 {hi:.3f}; {elapsed:.1f}s")


# -- training criteria -----------------------------------------------------------


class Runs:
    """Lazily trained desk runs, keyed by (variant, seed, tag)."""

    variants = {
        "default": {},
        "top1": {"weighting_mode": "top1"},
        "unnormalized": {"weighting_mode": "unnormalized"},
        "entropy_off": {"entropy_off_after": 0},
    }

    def __init__(self, root: Path):
        self.root = root
        self.cache = {}

    def config(self, variant, seed):
        return preset("multigoal-desk", seed=seed, **self.variants[variant])

    def get(self, variant, seed, tag="a"):
        key = (variant, seed, tag)
        if key not in self.cache:
            t0 = time.perf_counter()
            run_dir = self.root / f"{variant}-seed{seed}-{tag}"
            log = run_training(self.config(variant, seed), run_dir=run_dir)
            final = log.trainer.evaluate(FINAL_EVAL_EPISODES)
            grid = log.trainer.evaluate(25, starts=grid_starts())
            self.cache[key] = {
                "log": log,
                "dir": run_dir,
                "success": final.success_rate,
                "grid_goals": grid.goal_counts,
                "minutes": (time.perf_counter() - t0) / 60,
            }
            print(f"\n[{variant} seed {seed}] success {final.success_rate:.2f} grid goals {grid.goal_counts} "
                  f"({self.cache[key]['minutes']:.1f} min)")
        return self.cache[key]

    def success(self, variant, seeds):
        return [self.get(variant, s)["success"] for s in seeds]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def test_ac5_multigoal_success_and_modes(runs):
    cfg = runs.config("default", 0)
    env_steps = cfg.warmup_steps + cfg.total_steps
    results = [runs.get("default", s) for s in SEEDS]
    mean_success = float(np.mean([r["success"] for r in results]))
    distinct = [sum(c > 0 for c in r["grid_goals"]) for r in results]
    slowest = max(r["minutes"] for r in results)
    ok = env_steps <= 50_000 and mean_success >= 0.8 and min(distinct) >= 2 and slowest < 20
    assert report("AC-5", ok, f"mean success {mean_success:.2f} over seeds {SEEDS}; distinct grid goals per seed "
                              f"{distinct}; {env_steps} env steps; slowest seed {slowest:.1f} min")


def test_ac6_softmax_not_worse_than_alternatives(runs):
    means = {v: float(np.mean(runs.success(v, ABLATION_SEEDS))) for v in ("default", "top1", "unnormalized")}
    curves = {}
    for v in means:
        curves[v] = [[(r["step"], r["eval_success"]) for r in runs.get(v, s)["log"].rows if "eval_success" in r]
                     for s in ABLATION_SEEDS]
        print(f"\n{v} curves: {curves[v]}")
    ok = means["default"] >= means["top1"] and means["default"] >= means["unnormalized"]
    assert report("AC-6", ok, "mean final success " + ", ".join(f"{k}={v:.2f}" for k, v in means.items()))


def test_ac7_entropy_is_load_bearing(runs):
    on = float(np.mean(runs.success("default", SEEDS)))
    off = float(np.mean(runs.success("entropy_off", SEEDS)))
    assert report("AC-7", off < on, f"success with entropy {on:.2f}, without {off:.2f}")


def _monotone_within_long_runs(trace, target, window=1000):
    """Checks every maximal stretch of >= window steps on one side of target."""
    steps = np.array([r[0] for r in trace])
    ema = np.array([r[1] for r in trace])
    alpha = np.array([r[2] for r in trace])
    below = ema < target
    n_windows, violations = 0, 0
    start = 0
    for i in range(1, len(trace) + 1):
        if i == len(trace) or below[i] != below[start] or steps[i] != steps[i - 1] + 1:
            if i - start >= window:
                n_windows += 1
                diffs = np.diff(alpha[start:i])
                violations += int(np.sum(diffs < 0) if below[start] else np.sum(diffs > 0))
            start = i
    return n_windows, violations


def test_ac8_dual_alpha_direction(runs):
    total_windows, total_bad = 0, 0
    for s in SEEDS:
        tr = runs.get("default", s)["log"]
        n, bad = _monotone_within_long_runs(tr.dual_trace, tr.trainer.alpha.target_entropy)
        total_windows += n
        total_bad += bad
    ok = total_windows > 0 and total_bad == 0
    assert report("AC-8", ok, f"{total_windows} windows of >= 1000 steps on one side of target, {total_bad} violations")


def _metrics_without_wall(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    drop = rows[0].index("wall_seconds")
    return [r[:drop] + r[drop + 1:] for r in rows]


def test_ac10_determinism_and_resume(runs):
    t0 = time.perf_counter()
    first = runs.get("default", 0)
    second = runs.get("default", 0, tag="b")
    same_metrics = _metrics_without_wall(first["dir"] / "metrics.csv") == _metrics_without_wall(
        second["dir"] / "metrics.csv")
    same_dual = (first["dir"] / "dual.csv").read_bytes() == (second["dir"] / "dual.csv").read_bytes()

    cfg = runs.config("default", 0)
    mid = cfg.checkpoint_interval
    ck = first["dir"] / "checkpoints" / f"step_{mid:08d}.fmer"
    # Same config as the reference: total_steps also sets the actor lr schedule.
    resumed = run_training(cfg, run_dir=runs.root / "resume", trainer=Trainer.load(ck, cfg))
    ref_trace = [r for r in first["log"].dual_trace if r[0] > mid]
    same_trace = resumed.dual_trace == ref_trace and len(ref_trace) == cfg.total_steps - mid

    def strip(row):
        return {k: v for k, v in row.items() if k != "wall_seconds"}

    ref_rows = [strip(r) for r in first["log"].rows if r["step"] > mid]
    same_rows = [strip(r) for r in resumed.rows] == ref_rows
    elapsed = (time.perf_counter() - t0) / 60 + second["minutes"]
    ok = same_metrics and same_dual and same_trace and same_rows and elapsed < 25
    assert report("AC-10", ok, f"repeat run metrics identical {same_metrics}, dual identical {same_dual}; "
                               f"resume at {mid}: {len(ref_trace)}-step trace identical {same_trace}, rows identical {same_rows}; "
                               f"{elapsed:.1f} min")
