"""Flow-matching policy: straight-line paths, Euler sampling, CFM losses.

The flow lives in an unbounded latent space; actions are ``tanh`` of the
terminal latent.  Any object with ``__call__(x, t, s) -> Tensor`` (tape
path) and ``numpy(x, t, s) -> ndarray`` (fast path) can act as the field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor

CLAMP_EPS = 1e-6
WEIGHTING_MODES = ("softmax", "unnormalized", "top1")
# exp() argument cap for unnormalized weights; keeps the ablation finite
_MAX_LOG_WEIGHT = 60.0


@dataclass(frozen=True)
class FlowPathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    u_target: np.ndarray

    @classmethod
    def build(cls, x0, x1, t) -> "FlowPathSample":
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        tc = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
        return cls(x0=x0, x1=x1, t=t, xt=(1.0 - tc) * x0 + tc * x1, u_target=x1 - x0)


@dataclass
class CandidateSet:
    """M candidates per state; arrays are batched as (B, M, ...)."""

    state: np.ndarray
    latents: np.ndarray
    actions: np.ndarray
    q_values: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def n_candidates(self) -> int:
        return self.actions.shape[1]


def latent_of_action(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.arctanh(np.clip(a, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS))


def euler_path(field, s, x0, n_steps: int) -> np.ndarray:
    """All ``n_steps + 1`` Euler states, stacked on a new leading axis."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    path = [x]
    for k in range(n_steps):
        x = x + dt * field.numpy(x, k * dt, s)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite latent state at Euler step {k + 1}")
        path.append(x)
    return np.stack(path)


def sample_action(field, s, x0, n_steps: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the field from ``x0``; returns (tanh(x1), x1)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * field.numpy(x, k * dt, s)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite latent state at Euler step {k + 1}")
    return np.tanh(x), x


def sample_candidates(
    field, states, n_candidates: int, n_steps: int, rng: np.random.Generator
) -> CandidateSet:
    """Draw ``n_candidates`` policy samples for each row of ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    b = states.shape[0]
    d = field.action_dim
    x0 = rng.standard_normal((b * n_candidates, d))
    s_rep = np.repeat(states, n_candidates, axis=0)
    actions, x1 = sample_action(field, s_rep, x0, n_steps)
    return CandidateSet(
        state=states,
        latents=x1.reshape(b, n_candidates, d),
        actions=actions.reshape(b, n_candidates, d),
    )


def advantage_weights(q_values, tau: float, mode: str = "softmax") -> np.ndarray:
    """Per-candidate weights along the last axis of ``q_values``.

    The advantage baseline is the candidate mean of Q.  ``softmax`` is the
    normalised form; ``unnormalized`` is exp(A / tau); ``top1`` is one-hot on
    the best candidate (lowest index wins ties).
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    q = np.asarray(q_values, dtype=np.float64)
    if q.shape[-1] < 1:
        raise ValueError("need at least one candidate")
    if mode == "top1":
        w = np.zeros_like(q)
        idx = np.argmax(q, axis=-1)
        np.put_along_axis(w, idx[..., None], 1.0, axis=-1)
        return w
    z = (q - q.mean(axis=-1, keepdims=True)) / tau
    if mode == "softmax":
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if mode == "unnormalized":
        return np.exp(np.minimum(z, _MAX_LOG_WEIGHT))
    raise ValueError(f"unknown weighting mode {mode!r}; expected one of {WEIGHTING_MODES}")


def weights_entropy(weights) -> float:
    """Mean Shannon entropy of the normalised weight rows (diagnostic)."""
    w = np.asarray(weights, dtype=np.float64)
    p = w / w.sum(axis=-1, keepdims=True)
    h = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)
    return float(np.mean(h))


def draw_path(x1, rng: np.random.Generator, x0=None, t=None) -> FlowPathSample:
    """Straight-line path sample with fresh noise and time unless given."""
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n)
    return FlowPathSample.build(x0, x1, np.asarray(t, dtype=np.float64).reshape(n))


def _squared_errors(v: Tensor, u: np.ndarray) -> Tensor:
    return ad.sum(ad.square(ad.sub(v, Tensor(u, _check=False))), axis=1)


def cfm_loss(field, states, actions, rng: np.random.Generator, x0=None, t=None) -> Tensor:
    """Behaviour-cloning flow matching loss on a batch of (s, a) pairs."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    states = np.asarray(states, dtype=np.float64)
    x1 = latent_of_action(actions)
    assert np.all(np.abs(np.tanh(x1)) < 1.0)
    path = draw_path(x1, rng, x0, t)
    v = field(Tensor(path.xt, _check=False), path.t, states)
    return ad.mean(_squared_errors(v, path.u_target))


def weighted_regression(v: Tensor, path: FlowPathSample, weights_flat: np.ndarray, n_states: int) -> Tensor:
    """sum_j w_j ||v_j - u_j||^2 averaged over states."""
    sq = _squared_errors(v, path.u_target)
    w = Tensor(weights_flat, _check=False)
    return ad.mul(ad.sum(ad.mul(sq, w)), 1.0 / n_states)


def check_weights(weights: np.ndarray, atol: float = 1e-9) -> None:
    sums = np.asarray(weights).sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0.0):
        raise ValueError(f"weight rows do not sum to 1 (got {sums.min()}..{sums.max()})")


def wcfm_path(candidates: CandidateSet, rng: np.random.Generator, x0=None, t=None):
    """Flattened (B*M) path sample and repeated states for a candidate set."""
    b, m, d = candidates.actions.shape
    x1 = latent_of_action(candidates.actions.reshape(b * m, d))
    path = draw_path(x1, rng, x0, t)
    s_rep = np.repeat(candidates.state, m, axis=0)
    return path, s_rep


def wcfm_loss(
    field,
    candidates: CandidateSet,
    rng: np.random.Generator,
    x0=None,
    t=None,
    require_normalized: bool = True,
) -> Tensor:
    """Advantage-weighted CFM loss over a batch of candidate sets.

    Fresh (x0, t) per candidate; the regression target is the latent of the
    stored action, so boundary actions are clamped before ``arctanh``.
    """
    if candidates.weights is None:
        raise ValueError("candidate set has no weights")
    if require_normalized:
        check_weights(candidates.weights)
    b, m, _ = candidates.actions.shape
    path, s_rep = wcfm_path(candidates, rng, x0, t)
    v = field(Tensor(path.xt, _check=False), path.t, s_rep)
    return weighted_regression(v, path, candidates.weights.reshape(b * m), b)
