from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import pytest

from fmer import autodiff as ad
from fmer.autodiff import Tensor
from fmer.config import TrainConfig


def central_diff_grad(f, params, h=1e-5):
    """Central finite differences of scalar-valued ``f()`` w.r.t. each array in ``params``.

    ``params`` are perturbed in place and restored.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


class LinearField:
    """v(x, t, s) = x @ W + b with trainable (W, b); linear in its parameters."""

    def __init__(self, d, rng, scale=0.5):
        self.action_dim = d
        self.params = [scale * rng.standard_normal((d, d)), scale * rng.standard_normal(d)]
        self._live = None

    def set_params(self, params):
        self.params = [np.array(p, dtype=np.float64) for p in params]

    @contextmanager
    def tracked(self, tape):
        live = list(tape.watch(*[Tensor(p) for p in self.params]))
        self._live = live
        try:
            yield live
        finally:
            self._live = None

    def _tensors(self):
        if self._live is not None:
            return self._live
        return [Tensor(p) for p in self.params]

    def __call__(self, x, t, s):
        x = x if isinstance(x, Tensor) else Tensor(x)
        W, b = self._tensors()
        return ad.add(ad.matmul(x, W), b)

    def numpy(self, x, t, s):
        return np.asarray(x) @ self.params[0] + self.params[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**changes) -> TrainConfig:
    base = dict(
        env_name="multigoal", total_steps=50, warmup_steps=64, batch=16, hidden=16, n_hidden=2,
        candidates=4, ode_steps=4, eval_interval=25, n_eval=2, log_interval=10,
        checkpoint_interval=None, buffer_capacity=5000,
    )
    base.update(changes)
    return TrainConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
