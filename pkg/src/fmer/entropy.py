"""Divergence-based entropy terms for the latent flow and its tanh image."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flowpolicy import euler_path

H0_ACTION_MC_SAMPLES = 1_000_000
H0_ACTION_MC_SEED = 20240611


def gaussian_entropy(d: int) -> float:
    """Differential entropy of N(0, I_d)."""
    return 0.5 * d * (1.0 + math.log(2.0 * math.pi))


def log_tanh_jacobian(x) -> np.ndarray:
    """log(1 - tanh(x)^2) without cancellation for large |x|."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    return 2.0 * (math.log(2.0) - x - np.log1p(np.exp(-2.0 * x)))


def tanh_log_jacobian_mc(n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of log(1 - tanh(x)^2), x ~ N(0, 1)."""
    vals = log_tanh_jacobian(rng.standard_normal(n))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


@lru_cache(maxsize=None)
def _tanh_log_jacobian_constant() -> float:
    mean, _ = tanh_log_jacobian_mc(H0_ACTION_MC_SAMPLES, np.random.default_rng(H0_ACTION_MC_SEED))
    return mean


def h0_action(d: int) -> float:
    """Entropy of tanh(x0), x0 ~ N(0, I_d), using the cached MC constant."""
    return gaussian_entropy(d) + d * _tanh_log_jacobian_constant()


def rademacher(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


@dataclass
class DivergenceEstimate:
    """Per-row divergence terms at a batch of latent points (tape tensors)."""

    velocity: Tensor
    latent_div: Tensor
    tanh_correction: Tensor
    n_probes: int

    @property
    def action_div(self) -> Tensor:
        return ad.add(self.latent_div, self.tanh_correction)


@dataclass(frozen=True)
class EntropyReport:
    h0_latent: float
    h0_action: float
    h1_latent_estimate: float
    h1_action_estimate: float
    mean_latent_div: float
    mean_tanh_correction: float
    n_samples: int


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return (x.reshape(1, -1), True) if x.ndim == 1 else (x, False)


def divergence_terms(field, x, t, s, probes: int = 1, rng=None, eps=None) -> DivergenceEstimate:
    """Hutchinson latent divergence, tanh correction and the field value.

    ``eps`` (shape (probes, n, d) or (n, d)) overrides the random probes.
    All returned tensors stay on the active tape.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    xr, _ = _as_rows(x)
    n, d = xr.shape
    if eps is None:
        eps = rademacher((probes, n, d), rng)
    eps = np.asarray(eps, dtype=np.float64).reshape(probes, n, d)

    def f(z):
        return field(z, t, s)

    x_t = Tensor(xr, _check=False)
    div = None
    v = None
    for k in range(probes):
        y, jv = ad.jvp_with_output(f, x_t, eps[k])
        v = y if v is None else v
        est = ad.sum(ad.mul(jv, Tensor(eps[k], _check=False)), axis=1)
        div = est if div is None else ad.add(div, est)
    if probes > 1:
        div = ad.mul(div, 1.0 / probes)
    corr = ad.mul(ad.sum(ad.mul(v, Tensor(np.tanh(xr), _check=False)), axis=1), -2.0)
    return DivergenceEstimate(velocity=v, latent_div=div, tanh_correction=corr, n_probes=probes)


def hutchinson_divergence(field, x, t, s, probes: int = 1, rng=None, eps=None) -> Tensor:
    """Mean over Rademacher probes of eps^T (dv/dx) eps.

    Returns one value per row, or a scalar tensor for a single point.
    """
    _, single = _as_rows(x)
    div = divergence_terms(field, x, t, s, probes, rng, eps).latent_div
    return ad.reshape(div, ()) if single else div


def entropy_loss_from_terms(terms: DivergenceEstimate) -> Tensor:
    return ad.neg(ad.mean(terms.action_div))


def entropy_loss(field, xt, t, s, probes: int = 1, rng=None, eps=None) -> Tensor:
    """Negative mean action-space divergence at the given latent points."""
    return entropy_loss_from_terms(divergence_terms(field, xt, t, s, probes, rng, eps))


def simulated_points(field, states, n_steps: int, rng: np.random.Generator):
    """Latent points on freshly simulated Euler paths at uniform flow times.

    Returns (xt, t): one point per row of ``states``, read off the
    piecewise-linear Euler path.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    x0 = rng.standard_normal((n, field.action_dim))
    path = euler_path(field, states, x0, n_steps)
    t = rng.uniform(0.0, 1.0, size=n)
    k = np.minimum((t * n_steps).astype(int), n_steps - 1)
    t_k = k / n_steps
    x_k = path[k, np.arange(n)]
    xt = x_k + (t - t_k)[:, None] * field.numpy(x_k, t_k, states)
    if not np.isfinite(xt).all():
        raise ad.NonFiniteError("non-finite latent point in entropy estimate")
    return xt, t


def entropy_estimate(
    field, states, n_steps: int, rng: np.random.Generator, probes: int = 1
) -> EntropyReport:
    """Single-time-sample entropy estimate along freshly simulated paths."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    d = field.action_dim
    xt, t = simulated_points(field, states, n_steps, rng)
    terms = divergence_terms(field, xt, t, states, probes, rng)
    div = terms.latent_div.data
    corr = terms.tanh_correction.data
    h0x = gaussian_entropy(d)
    h0a = h0_action(d)
    return EntropyReport(
        h0_latent=h0x,
        h0_action=h0a,
        h1_latent_estimate=h0x + float(div.mean()),
        h1_action_estimate=h0a + float((div + corr).mean()),
        mean_latent_div=float(div.mean()),
        mean_tanh_correction=float(corr.mean()),
        n_samples=n,
    )


def tanh_divergence_identity_check(field, x, t, s, rel_step: float = 1e-5) -> tuple[float, float]:
    """Action-space divergence two ways at one latent point.

    lhs: central differences of a -> (1 - a^2) * v(arctanh(a)) in action
    coordinates, with per-axis step ``rel_step * (1 - a_i^2)``.
    rhs: exact latent trace minus 2 <tanh(x), v(x)>.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > 8:
        raise ValueError("identity check is limited to d <= 8")
    a = np.tanh(x)
    if np.any(np.abs(a) > 0.999):
        raise ValueError("|tanh(x_i)| > 0.999: too close to the boundary for finite differences")

    def induced(av):
        return (1.0 - av**2) * field.numpy(np.arctanh(av), t, s)

    lhs = 0.0
    for i in range(d):
        h = rel_step * (1.0 - a[i] ** 2)
        e = np.zeros(d)
        e[i] = h
        lhs += (induced(a + e)[i] - induced(a - e)[i]) / (2.0 * h)

    trace = ad.exact_jacobian_trace(lambda z: field(z, t, s), Tensor(x)).item()
    v = field.numpy(x, t, s)
    rhs = trace - 2.0 * float(np.dot(np.tanh(x), v))
    return float(lhs), rhs
