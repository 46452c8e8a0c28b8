"""MLP vector field and critics, Adam, Polyak averaging."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def mlp_param_count(sizes: Sequence[int]) -> int:
    return int(np.sum([sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1)]))


class MLP:
    """Mish MLP with a linear head.

    Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` of numpy
    arrays; ``W`` has shape (fan_in, fan_out).
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == len(self.sizes) - 2:
                w = w * out_scale
            params.append(w)
            params.append(np.zeros(fan_out))
        self.params: list[np.ndarray] = params
        self._live: list[Tensor] | None = None
        expected = mlp_param_count(self.sizes)
        assert self.n_params == expected, (self.n_params, expected)

    @property
    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.params):
            raise ValueError("parameter list length mismatch")
        for old, new in zip(self.params, params):
            if old.shape != np.shape(new):
                raise ValueError(f"shape mismatch {old.shape} vs {np.shape(new)}")
        if self._live is not None:
            raise RuntimeError("cannot replace parameters while they are tracked")
        self.params = [np.array(p, dtype=np.float64) for p in params]

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params]

    @contextmanager
    def tracked(self, tape: Tape) -> Iterator[list[Tensor]]:
        """Expose the parameters as watched tensors for the duration."""
        live = [tape.watch(Tensor(p)) for p in self.params]
        self._live = live
        try:
            yield live
        finally:
            self._live = None

    def forward(self, h: Tensor) -> Tensor:
        ps = self._live if self._live is not None else [Tensor(p, _check=False) for p in self.params]
        n_layers = len(ps) // 2
        for i in range(n_layers):
            h = ad.matmul(h, ps[2 * i]) + ps[2 * i + 1]
            if i < n_layers - 1:
                h = ad.mish(h)
        return h

    def forward_np(self, h: np.ndarray) -> np.ndarray:
        ps = self.params
        n_layers = len(ps) // 2
        for i in range(n_layers):
            h = h @ ps[2 * i] + ps[2 * i + 1]
            if i < n_layers - 1:
                h = ad.mish_np(h)
        return h


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    return t.reshape(n, 1)


def _state_rows(s, n: int) -> np.ndarray:
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if s.ndim == 1:
        s = np.broadcast_to(s, (n, s.shape[0]))
    return s


class VectorFieldNet:
    """Latent velocity v(x, t, s); input layout concat(x, t, s).

    ``x`` has shape (n, d) or (d,); ``t`` is a scalar or one value per row;
    ``s`` is one state per row or a single state shared by all rows.
    """

    def __init__(
        self,
        action_dim: int,
        state_dim: int,
        rng: np.random.Generator,
        hidden: int = 256,
        n_hidden: int = 3,
        out_scale: float = 0.01,
    ):
        self.action_dim = action_dim
        self.state_dim = state_dim
        sizes = [action_dim + 1 + state_dim] + [hidden] * n_hidden + [action_dim]
        self.mlp = MLP(sizes, rng, out_scale=out_scale)

    @property
    def params(self) -> list[np.ndarray]:
        return self.mlp.params

    def set_params(self, params) -> None:
        self.mlp.set_params(params)

    def tracked(self, tape: Tape):
        return self.mlp.tracked(tape)

    def __call__(self, x: Tensor, t, s) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 1
        if single:
            x = ad.reshape(x, (1, x.shape[0]))
        n = x.shape[0]
        t_col = Tensor(_time_column(t, n), _check=False)
        s_rows = Tensor(_state_rows(s, n), _check=False)
        out = self.mlp.forward(ad.concat([x, t_col, s_rows], axis=1))
        if single:
            out = ad.reshape(out, (self.action_dim,))
        return out

    def numpy(self, x: np.ndarray, t, s) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        n = x2.shape[0]
        h = np.concatenate([x2, _time_column(t, n), _state_rows(s, n)], axis=1)
        out = self.mlp.forward_np(h)
        return out.reshape(-1) if single else out


class CriticNet:
    """Q(s, a) with input concat(s, a); one scalar per row."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        hidden: int = 256,
        n_hidden: int = 3,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        sizes = [state_dim + action_dim] + [hidden] * n_hidden + [1]
        self.mlp = MLP(sizes, rng, out_scale=1.0)

    @property
    def params(self) -> list[np.ndarray]:
        return self.mlp.params

    def set_params(self, params) -> None:
        self.mlp.set_params(params)

    def tracked(self, tape: Tape):
        return self.mlp.tracked(tape)

    def __call__(self, s, a) -> Tensor:
        a = a if isinstance(a, Tensor) else Tensor(a)
        n = a.shape[0]
        s_rows = Tensor(_state_rows(s, n), _check=False)
        out = self.mlp.forward(ad.concat([s_rows, a], axis=1))
        return ad.reshape(out, (n,))

    def numpy(self, s, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        h = np.concatenate([_state_rows(s, n), a], axis=1)
        return self.mlp.forward_np(h).reshape(n)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> list[np.ndarray]:
    """One bias-corrected Adam update.  ``state`` is advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params / grads / state length mismatch")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for parameter {i}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def polyak_update(
    target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float = 0.005
) -> list[np.ndarray]:
    if len(target) != len(online):
        raise ValueError("parameter list length mismatch")
    out = []
    for tp, op in zip(target, online):
        if tp.shape != op.shape:
            raise ValueError(f"shape mismatch {tp.shape} vs {op.shape}")
        out.append((1.0 - tau) * tp + tau * op)
    return out


def linear_schedule(start: float, end: float, step: int, total: int) -> float:
    """Linear interpolation from ``start`` to ``end`` over ``total`` steps."""
    if total <= 0:
        return start
    frac = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac


def grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def param_digest(params: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()
