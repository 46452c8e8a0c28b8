"""Clipped double-Q critics with best-of-M bootstrap targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flowpolicy import sample_candidates
from .networks import CriticNet


@dataclass
class CriticPair:
    q1: CriticNet
    q2: CriticNet
    q1_target: CriticNet
    q2_target: CriticNet

    @classmethod
    def create(cls, state_dim, action_dim, rng, hidden=256, n_hidden=3) -> "CriticPair":
        q1 = CriticNet(state_dim, action_dim, rng, hidden, n_hidden)
        q2 = CriticNet(state_dim, action_dim, rng, hidden, n_hidden)
        q1t = CriticNet(state_dim, action_dim, rng, hidden, n_hidden)
        q2t = CriticNet(state_dim, action_dim, rng, hidden, n_hidden)
        q1t.set_params(q1.params)
        q2t.set_params(q2.params)
        return cls(q1, q2, q1t, q2t)

    def min_q(self, s, a, target: bool = True) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if target:
            return np.minimum(self.q1_target.numpy(s, a), self.q2_target.numpy(s, a))
        return np.minimum(self.q1.numpy(s, a), self.q2.numpy(s, a))


def best_candidate(q_values) -> np.ndarray:
    """Index of the highest value along the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(q_values), axis=-1)


def candidate_values(pair: CriticPair, candidates, target: bool) -> np.ndarray:
    b, m, d = candidates.actions.shape
    s_rep = np.repeat(candidates.state, m, axis=0)
    q = pair.min_q(s_rep, candidates.actions.reshape(b * m, d), target=target)
    if not np.isfinite(q).all():
        raise ad.NonFiniteError("non-finite Q value for candidate actions")
    return q.reshape(b, m)


def bellman_target(
    pair: CriticPair,
    r,
    s_next,
    done,
    policy,
    n_candidates: int,
    gamma: float,
    rng: np.random.Generator,
    n_steps: int = 10,
    return_index: bool = False,
):
    """r + gamma * (1 - done) * min target Q at the best of M policy samples."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    done = np.asarray(done, dtype=np.float64).reshape(-1)
    cands = sample_candidates(policy, s_next, n_candidates, n_steps, rng)
    q = candidate_values(pair, cands, target=True)
    idx = best_candidate(q)
    q_best = q[np.arange(q.shape[0]), idx]
    y = r + gamma * (1.0 - done) * q_best
    return (y, idx) if return_index else y


def critic_loss(pair: CriticPair, s, a, y) -> Tensor:
    """mean[(y - Q1)^2 + (y - Q2)^2]; targets are treated as constants."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != a.shape[0]:
        raise ValueError(f"{y.shape[0]} targets for {a.shape[0]} transitions")
    yt = Tensor(y)
    l1 = ad.square(ad.sub(yt, pair.q1(s, a)))
    l2 = ad.square(ad.sub(yt, pair.q2(s, a)))
    return ad.mean(ad.add(l1, l2))
