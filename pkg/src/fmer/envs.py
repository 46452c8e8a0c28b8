"""Desk-scale environments and analytic stub vector fields.

``MultiGoalEnv`` is a reconstruction of the classic 2D multi-goal task:
four goals at (+-5, 0), (0, +-5), position += a plus N(0, sigma^2) noise,
a quadratic action cost every step and a one-off bonus when the agent
enters radius 1 of any goal (which ends the episode).  As in the classic
task, each step also costs the distance to the nearest goal and positions
are clipped to the square arena [-7, 7]^2.  Without the distance term,
time-limit bootstrapping lets optimistic critic errors at far-away and
wall states compound, and learned policies drift off to the corners.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ActionOutOfBounds(ValueError):
    pass


def _check_action(a, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (dim,):
        raise ActionOutOfBounds(f"expected action of shape ({dim},), got {a.shape}")
    if not np.isfinite(a).all() or np.any(np.abs(a) > 1.0):
        raise ActionOutOfBounds(f"action {a} outside [-1, 1]^{dim}")
    return a


class MultiGoalEnv:
    state_dim = 2
    action_dim = 2
    name = "multigoal"

    def __init__(
        self,
        seed: int = 0,
        goal_radius: float = 5.0,
        capture_radius: float = 1.0,
        noise_std: float = 0.1,
        horizon: int = 30,
        action_cost: float = 0.1,
        goal_bonus: float = 10.0,
        start_jitter: float = 0.1,
        arena: float | None = 7.0,
        distance_cost: float = 1.0,
    ):
        r = goal_radius
        self.goals = np.array([[r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]])
        self.capture_radius = capture_radius
        self.noise_std = noise_std
        self.horizon = horizon
        self.action_cost = action_cost
        self.goal_bonus = goal_bonus
        self.start_jitter = start_jitter
        self.arena = arena
        self.distance_cost = distance_cost
        self.rng = np.random.default_rng(seed)
        self.position = np.zeros(2)
        self.t = 0
        self.captured_goal: int | None = None

    def reset(self, start=None) -> np.ndarray:
        if start is None:
            self.position = self.start_jitter * self.rng.standard_normal(2)
        else:
            self.position = np.asarray(start, dtype=np.float64).copy()
        self.t = 0
        self.captured_goal = None
        return self.position.copy()

    def goal_distances(self, pos) -> np.ndarray:
        return np.linalg.norm(self.goals - np.asarray(pos)[None, :], axis=1)

    def step(self, a) -> tuple[np.ndarray, float, bool, bool]:
        a = _check_action(a, self.action_dim)
        noise = self.noise_std * self.rng.standard_normal(2) if self.noise_std > 0 else 0.0
        self.position = self.position + a + noise
        if self.arena is not None:
            self.position = np.clip(self.position, -self.arena, self.arena)
        self.t += 1
        reward = -self.action_cost * float(a @ a)
        dist = self.goal_distances(self.position)
        reward -= self.distance_cost * float(dist.min())
        done = bool(dist.min() <= self.capture_radius)
        if done:
            self.captured_goal = int(np.argmin(dist))
            reward += self.goal_bonus
        truncated = (not done) and self.t >= self.horizon
        return self.position.copy(), reward, done, truncated

    def get_state(self) -> dict:
        return {
            "position": self.position.copy(),
            "t": self.t,
            "captured_goal": -1 if self.captured_goal is None else self.captured_goal,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.position = np.asarray(state["position"], dtype=np.float64).copy()
        self.t = int(state["t"])
        g = int(state["captured_goal"])
        self.captured_goal = None if g < 0 else g
        self.rng.bit_generator.state = state["rng"]


class PointMassEnv:
    """Double-integrator point mass pulled towards a fixed target.

    Observation is (position, velocity); reward is
    -||position - target|| - 0.01 ||a||^2, so it is never positive.
    """

    state_dim = 4
    action_dim = 2
    name = "pointmass"

    def __init__(
        self,
        seed: int = 0,
        target=(1.0, 1.0),
        dt: float = 0.1,
        damping: float = 0.1,
        horizon: int = 200,
        start_scale: float = 1.0,
    ):
        self.target = np.asarray(target, dtype=np.float64)
        self.dt = dt
        self.damping = damping
        self.horizon = horizon
        self.start_scale = start_scale
        self.rng = np.random.default_rng(seed)
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.t = 0
        self.captured_goal = None

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    def reset(self, start=None) -> np.ndarray:
        if start is None:
            self.position = self.start_scale * self.rng.uniform(-1.0, 1.0, size=2)
            self.velocity = np.zeros(2)
        else:
            start = np.asarray(start, dtype=np.float64)
            self.position = start[:2].copy()
            self.velocity = start[2:4].copy() if start.size >= 4 else np.zeros(2)
        self.t = 0
        return self._obs()

    def step(self, a) -> tuple[np.ndarray, float, bool, bool]:
        a = _check_action(a, self.action_dim)
        self.velocity = (1.0 - self.damping * self.dt) * self.velocity + self.dt * a
        self.position = self.position + self.dt * self.velocity
        self.t += 1
        reward = -float(np.linalg.norm(self.position - self.target)) - 0.01 * float(a @ a)
        return self._obs(), reward, False, self.t >= self.horizon

    def get_state(self) -> dict:
        return {
            "position": self.position.copy(),
            "velocity": self.velocity.copy(),
            "t": self.t,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.position = np.asarray(state["position"], dtype=np.float64).copy()
        self.velocity = np.asarray(state["velocity"], dtype=np.float64).copy()
        self.t = int(state["t"])
        self.rng.bit_generator.state = state["rng"]


ENVS = {"multigoal": MultiGoalEnv, "pointmass": PointMassEnv}


def make_env(name: str, seed: int = 0, **kwargs):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# stub vector fields
# ---------------------------------------------------------------------------


@dataclass
class StubField:
    """Analytic latent field with the same call surface as ``VectorFieldNet``.

    ``tensor_fn(x, t, s)`` builds the value from tape ops on (n, d) rows;
    ``numpy_fn`` is the plain-array twin.
    """

    action_dim: int
    tensor_fn: Callable
    numpy_fn: Callable
    kind: str = "custom"

    params: tuple = ()

    @contextmanager
    def tracked(self, tape):
        yield []

    def __call__(self, x, t, s) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 1:
            return ad.reshape(self.tensor_fn(ad.reshape(x, (1, x.shape[0])), t, s), (x.shape[0],))
        return self.tensor_fn(x, t, s)

    def numpy(self, x, t, s) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.numpy_fn(x.reshape(1, -1), t, s).reshape(-1)
        return self.numpy_fn(x, t, s)

    @classmethod
    def constant(cls, c) -> "StubField":
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))

        def tf(x, t, s):
            # 0 * x keeps the output on the tape with a zero Jacobian
            return ad.add(ad.mul(x, 0.0), Tensor(c))

        return cls(c.size, tf, lambda x, t, s: np.broadcast_to(c, x.shape).copy(), "constant")

    @classmethod
    def linear(cls, A) -> "StubField":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        At = Tensor(A.T)
        return cls(A.shape[0], lambda x, t, s: ad.matmul(x, At), lambda x, t, s: x @ A.T, "linear")

    @classmethod
    def identity(cls, d: int) -> "StubField":
        return cls(d, lambda x, t, s: ad.mul(x, 1.0), lambda x, t, s: x.copy(), "identity")


def q_landscape(env, critics, s, grid_n: int, target: bool = False) -> np.ndarray:
    """min(Q1, Q2) on a ``grid_n`` x ``grid_n`` action grid over [-1, 1]^2.

    Returns rows (a1, a2, q) with a1 varying slowest.
    """
    if env.action_dim != 2:
        raise ValueError("q_landscape needs a 2-D action space")
    axis = np.linspace(-1.0, 1.0, grid_n)
    a1, a2 = np.meshgrid(axis, axis, indexing="ij")
    actions = np.stack([a1.ravel(), a2.ravel()], axis=1)
    q = critics.min_q(np.asarray(s, dtype=np.float64), actions, target=target)
    return np.column_stack([actions, q])
