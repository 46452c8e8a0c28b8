"""Off-policy training loop for the flow policy.

Each gradient step: critic regression onto best-of-M clipped double-Q
targets, candidate generation and advantage weights, one Adam step on
W-CFM + alpha * entropy loss, a dual step on log(alpha), Polyak targets.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import config as cfgmod
from .autodiff import NonFiniteError, Tape, Tensor
from .config import TrainConfig
from .critic import CriticPair, bellman_target, best_candidate, candidate_values, critic_loss
from .entropy import divergence_terms, entropy_estimate, entropy_loss_from_terms, simulated_points
from .envs import make_env
from .flowpolicy import (
    CLAMP_EPS,
    advantage_weights,
    cfm_loss,
    sample_candidates,
    wcfm_path,
    weighted_regression,
    weights_entropy,
)
from .networks import (
    AdamState,
    VectorFieldNet,
    adam_step,
    grad_norm,
    linear_schedule,
    polyak_update,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "step",
    "episode_return",
    "eval_return_mean",
    "eval_return_std",
    "critic_loss",
    "wcfm_loss",
    "entropy_loss",
    "entropy_estimate",
    "alpha",
    "weights_entropy",
    "wall_seconds",
    "eval_success",
    "entropy_interp",
]

DUAL_COLUMNS = ["step", "entropy_estimate", "alpha"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class ResumeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# replay and dual variable
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """FIFO ring buffer with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, rng: np.random.Generator):
        self.capacity = int(capacity)
        self.rng = rng
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition) -> None:
        a = np.asarray(tr.a, dtype=np.float64)
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("stored actions must lie strictly inside the unit box")
        i = self.ptr
        self.s[i] = tr.s
        self.a[i] = a
        self.r[i] = tr.r
        self.s_next[i] = tr.s_next
        self.done[i] = float(tr.done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=batch)

    def sample(self, batch: int) -> dict[str, np.ndarray]:
        idx = self.sample_indices(batch)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "s_next": self.s_next[idx],
            "done": self.done[idx],
        }

    def state_sections(self) -> dict[str, object]:
        n = self.size
        return {
            "buffer.s": self.s[:n],
            "buffer.a": self.a[:n],
            "buffer.r": self.r[:n],
            "buffer.s_next": self.s_next[:n],
            "buffer.done": self.done[:n],
            "buffer.meta": np.array([self.size, self.ptr, self.capacity]),
        }

    def load_sections(self, sec: dict) -> None:
        size, ptr, capacity = (int(v) for v in sec["buffer.meta"])
        if capacity != self.capacity:
            raise ResumeMismatch(f"buffer capacity {capacity} != configured {self.capacity}")
        self.size, self.ptr = size, ptr
        for name in ("s", "a", "r", "s_next", "done"):
            getattr(self, name)[:size] = sec[f"buffer.{name}"]


@dataclass
class AlphaState:
    log_alpha: float
    target_entropy: float
    lr: float

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def update(self, entropy_estimate: float) -> float:
        """Dual step: alpha grows while the entropy estimate sits below target."""
        self.log_alpha = self.log_alpha - self.lr * (entropy_estimate - self.target_entropy)
        return self.alpha


@dataclass
class StepMetrics:
    critic_loss: float
    wcfm_loss: float
    entropy_loss: float
    entropy_estimate: float
    entropy_raw: float
    entropy_interp: float
    alpha: float
    weights_entropy: float
    q_mean: float
    critic_grad_norm: float
    actor_grad_norm: float


# ---------------------------------------------------------------------------
# interaction helpers
# ---------------------------------------------------------------------------


def act(policy, critics: CriticPair, s, n_candidates: int, rng: np.random.Generator,
        n_steps: int = 10, mode: str = "explore") -> np.ndarray:
    """Best of ``n_candidates`` policy samples under min(Q1, Q2).

    Both modes run the same procedure; ``greedy`` callers pass a dedicated
    evaluation rng so training streams are never consumed.
    """
    if mode not in ("explore", "greedy"):
        raise ValueError(f"unknown act mode {mode!r}")
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    cands = sample_candidates(policy, s, n_candidates, n_steps, rng)
    if n_candidates == 1:
        return cands.actions[0, 0]
    q = candidate_values(critics, cands, target=False)
    return cands.actions[0, best_candidate(q)[0]]


def random_action(action_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=action_dim) * (1.0 - CLAMP_EPS)


def to_box(a: np.ndarray) -> np.ndarray:
    """Inset by the clamp margin so stored actions stay strictly inside (-1, 1)."""
    return np.clip(a, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)


def warmup(env, buffer: ReplayBuffer, n: int, rng: np.random.Generator, obs=None):
    """Push ``n`` uniform-random transitions; returns (obs, finished episode returns)."""
    returns = []
    ep_ret = 0.0
    if n > 0 and obs is None:
        obs = env.reset()
    for _ in range(n):
        a = random_action(env.action_dim, rng)
        s_next, r, done, truncated = env.step(a)
        buffer.push(Transition(obs, a, r, s_next, done))
        ep_ret += r
        obs = s_next
        if done or truncated:
            returns.append(ep_ret)
            ep_ret = 0.0
            obs = env.reset()
    return obs, returns


@dataclass
class EvalSummary:
    episodes: int
    returns: list[float] = field(default_factory=list)
    successes: int = 0
    goal_counts: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.returns)) if self.returns else float("nan")

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else float("nan")

    def to_json(self) -> dict:
        if self.episodes == 0:
            return {"episodes": 0}
        return {
            "episodes": self.episodes,
            "return_mean": self.mean,
            "return_std": self.std,
            "success_rate": self.success_rate,
            "goal_histogram": list(self.goal_counts),
            "returns": list(self.returns),
        }


def evaluate_policy(policy, critics, env, n_episodes: int, rng: np.random.Generator,
                    n_candidates: int, n_steps: int, starts=None) -> EvalSummary:
    """Greedy rollouts; ``starts`` optionally fixes each episode's start state."""
    goals = getattr(env, "goals", None)
    summary = EvalSummary(episodes=n_episodes,
                          goal_counts=[0] * (len(goals) if goals is not None else 0))
    for ep in range(n_episodes):
        obs = env.reset(None if starts is None else starts[ep])
        ep_ret = 0.0
        while True:
            a = act(policy, critics, obs, n_candidates, rng, n_steps, mode="greedy")
            obs, r, done, truncated = env.step(a)
            ep_ret += r
            if done or truncated:
                break
        summary.returns.append(ep_ret)
        captured = getattr(env, "captured_goal", None)
        if captured is not None:
            summary.successes += 1
            summary.goal_counts[captured] += 1
    return summary


def grid_starts(n: int = 5, half_width: float = 2.5) -> np.ndarray:
    axis = np.linspace(-half_width, half_width, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def fit_behavior_cloning(field, states, actions, n_updates: int, batch: int, lr: float,
                         rng: np.random.Generator) -> list[float]:
    """Plain flow-matching regression on a fixed dataset; returns the loss trace."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    opt = AdamState.zeros_like(field.params)
    losses = []
    for _ in range(n_updates):
        idx = rng.integers(0, len(actions), size=batch)
        with Tape() as tape, field.tracked(tape) as ps:
            loss = cfm_loss(field, states[idx], actions[idx], rng)
            g = ad.grad(loss, ps)
        field.set_params(adam_step(field.params, g, opt, lr))
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

RNG_STREAMS = ("buffer", "act", "train", "warmup")
EVAL_SEED_OFFSET = 10_007


def _rng_to_bytes(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state).encode()


def _rng_from_bytes(rng: np.random.Generator, raw: bytes) -> None:
    rng.bit_generator.state = json.loads(raw.decode())


class Trainer:
    """Owns all mutable training state for one run."""

    def __init__(self, config: TrainConfig, env=None):
        self.config = config.validate()
        seq = np.random.SeedSequence(config.seed)
        init_seq, env_seq, *stream_seqs = seq.spawn(2 + len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, stream_seqs)}
        env_seed = int(env_seq.generate_state(1)[0])
        self.env = env if env is not None else make_env(config.env_name, seed=env_seed)
        d, ds = self.env.action_dim, self.env.state_dim
        init_rng = np.random.default_rng(init_seq)
        self.actor = VectorFieldNet(d, ds, init_rng, hidden=config.hidden, n_hidden=config.n_hidden)
        self.critics = CriticPair.create(ds, d, init_rng, hidden=config.hidden, n_hidden=config.n_hidden)
        self.actor_opt = AdamState.zeros_like(self.actor.params)
        self.critic_opt = AdamState.zeros_like(self.critics.q1.params + self.critics.q2.params)
        target = -float(d) if config.target_entropy is None else float(config.target_entropy)
        self.alpha = AlphaState(math.log(config.alpha_init), target, config.alpha_lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, ds, d, self.rngs["buffer"])
        self.step = 0
        self.updates = 0
        self.obs: np.ndarray | None = None
        self.ep_return = 0.0
        self.entropy_ema: float | None = None
        self.finished_returns: list[float] = []
        self.last_metrics: StepMetrics | None = None

    # -- interaction -------------------------------------------------------

    def warmup(self, n: int | None = None) -> list[float]:
        n = self.config.warmup_steps if n is None else n
        self.obs, returns = warmup(self.env, self.buffer, n, self.rngs["warmup"], self.obs)
        self.ep_return = 0.0
        return returns

    def env_step(self) -> tuple[float, bool, bool]:
        if self.obs is None:
            self.obs = self.env.reset()
            self.ep_return = 0.0
        c = self.config
        try:
            a = to_box(act(self.actor, self.critics, self.obs, c.candidates, self.rngs["act"], c.ode_steps))
        except (NonFiniteError, FloatingPointError) as exc:
            dump = {"step": self.step, "update": self.updates, "phase": "act", "error": str(exc)}
            raise TrainingDiverged(f"non-finite value at step {self.step}: {exc}", dump) from exc
        s_next, r, done, truncated = self.env.step(a)
        self.buffer.push(Transition(self.obs, a, r, s_next, done))
        self.ep_return += r
        self.obs = s_next
        if done or truncated:
            self.finished_returns.append(self.ep_return)
            self.ep_return = 0.0
            self.obs = self.env.reset()
        return r, done, truncated

    # -- learning ----------------------------------------------------------

    def entropy_active(self) -> bool:
        off = self.config.entropy_off_after
        return off is None or self.step < off

    def actor_lr(self) -> float:
        c = self.config
        return linear_schedule(c.actor_lr, c.actor_lr_final, self.step, c.total_steps)

    def train_step(self) -> StepMetrics:
        c = self.config
        if len(self.buffer) < c.batch:
            raise ValueError(f"buffer holds {len(self.buffer)} < batch {c.batch} transitions")
        rng = self.rngs["train"]
        diag: dict = {"step": self.step, "update": self.updates}
        try:
            m = self._train_step(rng, diag)
        except (NonFiniteError, FloatingPointError) as exc:
            diag["error"] = str(exc)
            raise TrainingDiverged(f"non-finite value at step {self.step}: {exc}", diag) from exc
        self.updates += 1
        self.last_metrics = m
        return m

    def _train_step(self, rng: np.random.Generator, diag: dict) -> StepMetrics:
        c = self.config
        batch = self.buffer.sample(c.batch)
        self.critic_update(batch, rng, diag)
        policy = self.actor_update(batch["s"], rng, diag)
        rep = self.dual_update(batch["s"], rng)
        self.target_update()
        lent = diag["entropy_loss"]
        return StepMetrics(
            critic_loss=diag["critic_loss"],
            wcfm_loss=diag["wcfm_loss"],
            entropy_loss=float("nan") if lent is None else lent,
            entropy_estimate=self.entropy_ema,
            entropy_raw=rep.h1_action_estimate,
            entropy_interp=float("nan") if lent is None else rep.h0_action - lent,
            alpha=self.alpha.alpha,
            weights_entropy=weights_entropy(policy["weights"]),
            q_mean=float(policy["q"].mean()),
            critic_grad_norm=diag["critic_grad_norm"],
            actor_grad_norm=diag["actor_grad_norm"],
        )

    def critic_update(self, batch: dict, rng: np.random.Generator, diag: dict | None = None) -> float:
        """One Adam step on both online critics; the actor is only sampled."""
        c = self.config
        diag = {} if diag is None else diag
        critics = self.critics
        y = bellman_target(critics, batch["r"] * c.reward_scale, batch["s_next"], batch["done"],
                           self.actor, c.candidates, c.gamma, rng, n_steps=c.ode_steps)
        with Tape() as tape, critics.q1.tracked(tape) as p1, critics.q2.tracked(tape) as p2:
            lq = critic_loss(critics, batch["s"], batch["a"], y)
            g = ad.grad(lq, p1 + p2)
        diag["critic_loss"] = lq.item()
        diag["critic_grad_norm"] = grad_norm(g)
        n1 = len(critics.q1.params)
        new = adam_step(critics.q1.params + critics.q2.params, g, self.critic_opt, c.critic_lr)
        critics.q1.set_params(new[:n1])
        critics.q2.set_params(new[n1:])
        return diag["critic_loss"]

    def policy_loss(self, s: np.ndarray, rng: np.random.Generator, diag: dict | None = None):
        """Build W-CFM (+ alpha * entropy) on the current tape.

        Returns (total, wcfm, entropy-or-None, q, weights); the caller owns
        the tape and the tracked actor parameters.
        """
        c = self.config
        diag = {} if diag is None else diag
        actor = self.actor
        cands = sample_candidates(actor, s, c.candidates, c.ode_steps, rng)
        q = candidate_values(self.critics, cands, target=False)
        w = advantage_weights(q, c.tau_advantage, c.weighting_mode)
        cands.q_values, cands.weights = q, w
        b, m, _ = cands.actions.shape
        path, s_rep = wcfm_path(cands, rng)
        use_ent = self.entropy_active()
        if use_ent and c.entropy_points == "interpolant":
            terms = divergence_terms(actor, path.xt, path.t, s_rep, c.probes, rng)
            lw = weighted_regression(terms.velocity, path, w.reshape(b * m), b)
            lent = entropy_loss_from_terms(terms)
        else:
            v = actor(Tensor(path.xt, _check=False), path.t, s_rep)
            lw = weighted_regression(v, path, w.reshape(b * m), b)
            lent = None
            if use_ent:
                xt, ts = simulated_points(actor, s_rep, c.ode_steps, rng)
                lent = entropy_loss_from_terms(divergence_terms(actor, xt, ts, s_rep, c.probes, rng))
        total = ad.add(lw, ad.mul(lent, self.alpha.alpha)) if lent is not None else lw
        diag["wcfm_loss"] = lw.item()
        diag["entropy_loss"] = lent.item() if lent is not None else None
        return total, lw, lent, q, w

    def actor_update(self, s: np.ndarray, rng: np.random.Generator, diag: dict | None = None) -> dict:
        """One Adam step on the policy loss; critics are read, never updated."""
        diag = {} if diag is None else diag
        with Tape() as tape, self.actor.tracked(tape) as pa:
            total, _, _, q, w = self.policy_loss(s, rng, diag)
            ga = ad.grad(total, pa)
        diag["actor_grad_norm"] = grad_norm(ga)
        self.actor.set_params(adam_step(self.actor.params, ga, self.actor_opt, self.actor_lr()))
        return {"q": q, "weights": w}

    def dual_update(self, s: np.ndarray, rng: np.random.Generator):
        """Fold a fresh entropy estimate into the running average, then step log(alpha)."""
        c = self.config
        rep = entropy_estimate(self.actor, s, c.ode_steps, rng, probes=c.probes)
        h = rep.h1_action_estimate
        beta = c.entropy_smoothing
        self.entropy_ema = h if self.entropy_ema is None else beta * self.entropy_ema + (1 - beta) * h
        if c.learn_alpha:
            self.alpha.update(self.entropy_ema)
        return rep

    def target_update(self) -> None:
        c, critics = self.config, self.critics
        critics.q1_target.set_params(polyak_update(critics.q1_target.params, critics.q1.params, c.polyak))
        critics.q2_target.set_params(polyak_update(critics.q2_target.params, critics.q2.params, c.polyak))

    # -- evaluation --------------------------------------------------------

    def evaluate(self, n_episodes: int | None = None, seed: int | None = None, starts=None) -> EvalSummary:
        c = self.config
        n = c.n_eval if n_episodes is None else n_episodes
        seed = c.seed + EVAL_SEED_OFFSET if seed is None else seed
        env = make_env(c.env_name, seed=seed)
        rng = np.random.default_rng(seed)
        return evaluate_policy(self.actor, self.critics, env, n, rng, c.candidates, c.ode_steps, starts)

    # -- persistence -------------------------------------------------------

    def state_sections(self) -> dict[str, object]:
        sec: dict[str, object] = {}
        nets = {
            "actor": self.actor, "q1": self.critics.q1, "q2": self.critics.q2,
            "q1_target": self.critics.q1_target, "q2_target": self.critics.q2_target,
        }
        for name, net in nets.items():
            for i, p in enumerate(net.params):
                sec[f"{name}.{i}"] = p
        for name, opt in (("opt.actor", self.actor_opt), ("opt.critic", self.critic_opt)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                sec[f"{name}.m.{i}"] = m
                sec[f"{name}.v.{i}"] = v
            sec[f"{name}.step"] = np.array([opt.step])
        ema = np.nan if self.entropy_ema is None else self.entropy_ema
        sec["log_alpha"] = np.array([self.alpha.log_alpha])
        sec["trainer.floats"] = np.array([self.ep_return, ema])
        sec["trainer.counters"] = np.array([self.step, self.updates, int(self.obs is not None)])
        if self.obs is not None:
            sec["trainer.obs"] = self.obs
        sec.update(self.buffer.state_sections())
        for name, rng in self.rngs.items():
            sec[f"rng.{name}"] = _rng_to_bytes(rng)
        env_state = self.env.get_state()
        for key, val in env_state.items():
            if key == "rng":
                sec["env.rng"] = json.dumps(val).encode()
            else:
                sec[f"env.{key}"] = np.asarray(val)
        return sec

    def load_sections(self, sec: dict) -> None:
        nets = {
            "actor": self.actor, "q1": self.critics.q1, "q2": self.critics.q2,
            "q1_target": self.critics.q1_target, "q2_target": self.critics.q2_target,
        }
        for name, net in nets.items():
            net.set_params([sec[f"{name}.{i}"] for i in range(len(net.params))])
        for name, opt in (("opt.actor", self.actor_opt), ("opt.critic", self.critic_opt)):
            opt.m = [np.array(sec[f"{name}.m.{i}"]) for i in range(len(opt.m))]
            opt.v = [np.array(sec[f"{name}.v.{i}"]) for i in range(len(opt.v))]
            opt.step = int(sec[f"{name}.step"][0])
        self.alpha.log_alpha = float(sec["log_alpha"][0])
        ep_return, ema = (float(v) for v in sec["trainer.floats"])
        self.ep_return = ep_return
        self.entropy_ema = None if math.isnan(ema) else ema
        step, updates, has_obs = (int(v) for v in sec["trainer.counters"])
        self.step, self.updates = step, updates
        self.obs = np.array(sec["trainer.obs"]) if has_obs else None
        self.buffer.load_sections(sec)
        for name, rng in self.rngs.items():
            _rng_from_bytes(rng, sec[f"rng.{name}"])
        env_state = {}
        for key in self.env.get_state():
            if key == "rng":
                env_state["rng"] = json.loads(sec["env.rng"].decode())
            else:
                env_state[key] = sec[f"env.{key}"]
        self.env.set_state(env_state)

    def quantize_(self) -> None:
        """Snap all float state to float32 precision (what a checkpoint stores)."""
        sec = self.state_sections()
        q = {k: ckpt.quantize(v) if isinstance(v, np.ndarray) and v.dtype.kind == "f" else v
             for k, v in sec.items()}
        self.load_sections(q)

    def save(self, path) -> Path:
        self.quantize_()
        ckpt.save(path, cfgmod.serialize(self.config), self.state_sections())
        return Path(path)

    @classmethod
    def load(cls, path, config: TrainConfig | None = None, env=None) -> "Trainer":
        text, sec = ckpt.load(path)
        stored = cfgmod.parse(text)
        if config is not None:
            check_resume_compatible(stored, config)
        else:
            config = stored
        trainer = cls(config, env=env)
        trainer.load_sections(sec)
        return trainer


# fields that may change between a checkpoint and the run resuming from it
RESUMABLE_FIELDS = {"total_steps", "eval_interval", "n_eval", "checkpoint_interval", "log_interval"}


def check_resume_compatible(stored: TrainConfig, requested: TrainConfig) -> None:
    diffs = [f.name for f in fields(TrainConfig)
             if f.name not in RESUMABLE_FIELDS and getattr(stored, f.name) != getattr(requested, f.name)]
    if diffs:
        raise ResumeMismatch(f"checkpoint config differs in: {', '.join(diffs)}")


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


class MetricsWriter:
    def __init__(self, path: Path | None, columns: list[str]):
        self.rows: list[dict] = []
        self.columns = columns
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(columns)
            self._fh.flush()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row.get(col)) for col in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class MetricsLog:
    rows: list[dict]
    dual_trace: list[tuple[int, float, float]]
    final_eval: dict | None = None
    run_dir: Path | None = None
    checkpoints: list[Path] = field(default_factory=list)


def run_training(config: TrainConfig, env=None, run_dir=None, trainer: Trainer | None = None,
                 progress: bool = False) -> MetricsLog:
    """Warm-up, then interaction + K gradient steps per env step until ``total_steps``.

    With ``trainer`` given (e.g. loaded from a checkpoint) warm-up is skipped
    and the run continues from ``trainer.step``.
    """
    config = config.validate()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "plotdata").mkdir(exist_ok=True)
        (run_dir / "config.txt").write_text(cfgmod.serialize(config))
    resumed = trainer is not None
    if trainer is None:
        trainer = Trainer(config, env=env)
    else:
        trainer.config = config
    metrics = MetricsWriter(run_dir / "metrics.csv" if run_dir else None, METRICS_COLUMNS)
    dual = MetricsWriter(run_dir / "dual.csv" if run_dir else None, DUAL_COLUMNS)
    out = MetricsLog(rows=metrics.rows, dual_trace=[], run_dir=run_dir)
    t0 = time.perf_counter()
    try:
        if not resumed and config.warmup_steps > 0:
            returns = trainer.warmup()
            metrics.write({
                "step": 0,
                "episode_return": float(np.mean(returns)) if returns else None,
                "alpha": trainer.alpha.alpha,
                "wall_seconds": time.perf_counter() - t0,
            })
        window_returns: list[float] = []
        while trainer.step < config.total_steps:
            trainer.step += 1
            m = None
            try:
                trainer.env_step()
                if len(trainer.buffer) >= config.batch:
                    for _ in range(config.gradient_steps):
                        m = trainer.train_step()
            except TrainingDiverged as exc:
                if run_dir is not None:
                    (run_dir / "divergence_dump.json").write_text(json.dumps(exc.dump, indent=2, default=str))
                raise
            if m is not None:
                dual_row = (trainer.step, m.entropy_estimate, m.alpha)
                out.dual_trace.append(dual_row)
                dual.write(dict(zip(DUAL_COLUMNS, dual_row)))
            window_returns.extend(trainer.finished_returns)
            trainer.finished_returns.clear()

            step = trainer.step
            is_eval = step % config.eval_interval == 0 and config.n_eval > 0
            if step % config.log_interval == 0 or is_eval or step == config.total_steps:
                row = {"step": step, "alpha": trainer.alpha.alpha}
                if window_returns:
                    row["episode_return"] = float(np.mean(window_returns))
                    window_returns = []
                if m is not None:
                    row.update(
                        critic_loss=m.critic_loss, wcfm_loss=m.wcfm_loss, entropy_loss=m.entropy_loss,
                        entropy_estimate=m.entropy_estimate, weights_entropy=m.weights_entropy,
                        entropy_interp=m.entropy_interp,
                    )
                if is_eval:
                    ev = trainer.evaluate()
                    row.update(eval_return_mean=ev.mean, eval_return_std=ev.std,
                               eval_success=ev.success_rate)
                row["wall_seconds"] = time.perf_counter() - t0
                metrics.write(row)
                if progress:
                    log.info("step %d %s", step, {k: v for k, v in row.items() if k != "step"})
            if (run_dir is not None and config.checkpoint_interval
                    and step % config.checkpoint_interval == 0):
                out.checkpoints.append(trainer.save(run_dir / "checkpoints" / f"step_{step:08d}.fmer"))
        if run_dir is not None and (not out.checkpoints or out.checkpoints[-1].stem != f"step_{trainer.step:08d}"):
            out.checkpoints.append(trainer.save(run_dir / "checkpoints" / f"step_{trainer.step:08d}.fmer"))
    finally:
        metrics.close()
        dual.close()
    out.trainer = trainer
    return out
