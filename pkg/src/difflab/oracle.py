"""Exact posterior quantities for Dirac-mixture targets.

For ``x_0 ~ sum_i w_i delta_{a_i}`` and ``x_t | a_i ~ N(s a_i, s^2 sigma^2 I)``
every conditional expectation is a finite softmax-weighted sum over atoms.
All weights are computed in log space so that tiny ``sigma`` does not
overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import DiracMixture, as_points, forward_sample
from .errors import ConfigError, DomainError
from .rng import as_stream
from .schedule import Schedule


def _batch(x, d):
    x = as_points(x, d)
    return x.reshape(-1, d), x.shape


def _check_t(t, allow_zero=False):
    if not (0.0 <= t <= 1.0) or (t == 0.0 and not allow_zero):
        raise DomainError(f"t={t} is outside (0, 1]")


def gaussian_loglik(mix: DiracMixture, x, scale, var) -> np.ndarray:
    """``log w_i + log N(x; scale * a_i, var I)`` up to the shared constant, shape (n, k)."""
    d2 = ((x[:, None, :] - scale * mix.atoms[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    return logw[None, :] - d2 / (2.0 * var)


def softmax_rows(loglik: np.ndarray) -> np.ndarray:
    m = loglik.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DomainError("point has zero likelihood under every atom")
    e = np.exp(loglik - m)
    return e / e.sum(axis=1, keepdims=True)


def posterior_weights(mix: DiracMixture, sched: Schedule, x, t: float) -> np.ndarray:
    """``p(x_0 = a_i | x_t = x)`` for each row of ``x``; shape ``(..., k)``.

    At ``t = 0`` the posterior is the indicator of the nearest atom (ties go
    to the lowest index).
    """
    _check_t(t, allow_zero=True)
    xb, shape = _batch(x, mix.dim)
    if t == 0.0:
        r = np.zeros((len(xb), len(mix)))
        r[np.arange(len(xb)), mix.nearest_index(xb)] = 1.0
    else:
        s, sig = sched.s(t), sched.sigma(t)
        r = softmax_rows(gaussian_loglik(mix, xb, s, (s * sig) ** 2))
    return r.reshape(shape[:-1] + (len(mix),))


def denoise_x0(mix: DiracMixture, sched: Schedule, x, t: float) -> np.ndarray:
    """Posterior mean ``E[x_0 | x_t = x]``."""
    _check_t(t, allow_zero=True)
    r = posterior_weights(mix, sched, x, t)
    return r @ mix.atoms


def score(mix: DiracMixture, sched: Schedule, x, t: float) -> np.ndarray:
    """``grad log p_t(x)`` via Tweedie: ``(s E[x_0|x] - x) / (s sigma)^2``."""
    _check_t(t)
    x = np.asarray(x, dtype=float)
    s, sig = sched.s(t), sched.sigma(t)
    return (s * denoise_x0(mix, sched, x, t) - x) / (s * sig) ** 2


def _check_xprev(sched, t, dt):
    if not sched.is_ve:
        raise ConfigError("E[x_{t-dt} | x_t] is only available for VE schedules")
    _check_t(t)
    if not 0.0 < dt <= t:
        raise DomainError(f"need 0 < dt <= t, got dt={dt}, t={t}")


def denoise_xprev(mix: DiracMixture, sched: Schedule, x, t: float, dt: float) -> np.ndarray:
    """``E[x_{t-dt} | x_t = x] = (dt/t) E[x_0|x] + (1 - dt/t) x`` (VE only)."""
    _check_xprev(sched, t, dt)
    x = np.asarray(x, dtype=float)
    c = dt / t
    return c * denoise_x0(mix, sched, x, t) + (1.0 - c) * x


def denoise_xprev_per_atom(mix: DiracMixture, sched: Schedule, x, t: float, dt: float) -> np.ndarray:
    """Same quantity as :func:`denoise_xprev`, written as a posterior average of the
    single-atom Gaussian bridge means ``a_i + (sigma_{t-dt}^2 / sigma_t^2)(x - a_i)``."""
    _check_xprev(sched, t, dt)
    xb, shape = _batch(x, mix.dim)
    r = posterior_weights(mix, sched, xb, t)
    ratio = sched.sigma(t - dt) ** 2 / sched.sigma(t) ** 2
    bridge = mix.atoms[None, :, :] + ratio * (xb[:, None, :] - mix.atoms[None, :, :])
    return np.einsum("nk,nkd->nd", r, bridge).reshape(shape)


def log_density(mix: DiracMixture, sched: Schedule, x, t: float) -> np.ndarray:
    """``log p_t(x)`` of the noised mixture."""
    _check_t(t)
    xb, shape = _batch(x, mix.dim)
    s, sig = sched.s(t), sched.sigma(t)
    var = (s * sig) ** 2
    ll = gaussian_loglik(mix, xb, s, var)
    out = logsumexp(ll, axis=1) - 0.5 * mix.dim * math.log(2.0 * math.pi * var)
    return out.reshape(shape[:-1])


def cdf_1d(mix: DiracMixture, sched: Schedule, x, t: float) -> np.ndarray:
    """CDF of ``p_t`` for a one-dimensional mixture."""
    if mix.dim != 1:
        raise ConfigError("cdf_1d needs a one-dimensional mixture")
    _check_t(t)
    x = np.asarray(x, dtype=float)
    s, sig = sched.s(t), sched.sigma(t)
    z = (x[..., None] - s * mix.atoms[:, 0]) / (s * sig)
    return (ndtr(z) * mix.weights).sum(-1)


def quantile_1d(mix: DiracMixture, sched: Schedule, u, t: float, iters: int = 80) -> np.ndarray:
    """Inverse of :func:`cdf_1d` by vectorised bisection."""
    u = np.asarray(u, dtype=float)
    s, sig = sched.s(t), sched.sigma(t)
    spread = 40.0 * s * sig
    lo = np.full(u.shape, s * mix.atoms.min() - spread)
    hi = np.full(u.shape, s * mix.atoms.max() + spread)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = cdf_1d(mix, sched, mid, t) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_marginal(mix: DiracMixture, sched: Schedule, t: float, n: int, rng) -> np.ndarray:
    """Exact draws from ``p_t``: pick an atom, then noise it forward."""
    rng = as_stream(rng)
    return forward_sample(mix.sample(n, rng), t, sched, rng)


@dataclass(frozen=True, eq=False)
class ExactDenoiser:
    """Denoiser backed by the closed-form posterior of a Dirac mixture."""

    mixture: DiracMixture
    schedule: Schedule

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def __call__(self, x, t):
        return denoise_x0(self.mixture, self.schedule, x, t)

    def xprev(self, x, t, dt):
        return denoise_xprev(self.mixture, self.schedule, x, t, dt)
