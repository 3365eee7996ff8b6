"""Reverse samplers.

Discrete VE samplers (DDPM, its x0-prediction variant, DDIM) and generic
integrators for the reverse SDE and the probability-flow ODE. Every sampler
runs time backwards on the grid ``t_k = (T - k) / T`` from ``t = 1`` down to
``stop_time``, and every step maps a batch ``(n, d)`` to a batch.

A *denoiser* is any callable ``denoiser(x, t) -> E[x_0 | x_t = x]``. It may
also expose ``xprev(x, t, dt) -> E[x_{t-dt} | x_t = x]``; otherwise that mean
is obtained from the x0 prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericalError
from .rng import as_stream
from .schedule import Schedule

METHODS = ("ddpm", "ddpm-x0", "ddim", "sde-euler-maruyama", "ode-euler", "ode-heun")
_VE_ONLY = ("ddpm", "ddpm-x0", "ddim")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States of ``n`` samples on a decreasing time grid.

    ``states`` has shape ``(len(times), n, d)``.
    """

    times: np.ndarray
    states: np.ndarray
    seed: int | None = None
    method: str = ""
    schedule: dict = field(default_factory=dict)

    @property
    def endpoints(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        idx = np.flatnonzero(np.abs(self.times - t) < 1e-12)
        if idx.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return self.states[idx[0]]


@dataclass(frozen=True, eq=False)
class SamplerConfig:
    """What to run: method, grid size, schedule and denoiser.

    ``stop_time`` defaults to 0 for the discrete samplers and the SDE, and to
    ``1/T`` for the ODE integrators (the VE field has a ``1/t`` factor and
    Heun evaluates at the destination time). ``keep`` lists the grid times to
    record; ``None`` records every step.
    """

    method: str
    schedule: Schedule
    denoiser: Callable
    steps: int | None = None
    stop_time: float | None = None
    n: int = 1
    dim: int | None = None
    keep: Sequence[float] | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown sampler {self.method!r}; expected one of {METHODS}")
        if self.steps is None:
            object.__setattr__(self, "steps", self.schedule.steps)
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be an integer >= 1")
        if self.method in _VE_ONLY and not self.schedule.is_ve:
            raise ConfigError(f"{self.method} is defined for the VE schedule; use sde/ode methods otherwise")
        if self.stop_time is None:
            default = 1.0 / self.steps if self.method.startswith("ode") else 0.0
            object.__setattr__(self, "stop_time", default)
        if not 0.0 <= self.stop_time < 1.0:
            raise ConfigError("stop_time must lie in [0, 1)")
        k = round(self.stop_time * self.steps)
        if abs(k / self.steps - self.stop_time) > 1e-12:
            raise ConfigError(f"stop_time {self.stop_time} is not on the 1/{self.steps} grid")
        if self.n < 1:
            raise ConfigError("n must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def grid(self) -> np.ndarray:
        return time_grid(self.steps, self.stop_time)


def time_grid(T: int, stop_time: float = 0.0) -> np.ndarray:
    """``1, 1 - 1/T, ..., stop_time`` computed from integers (no drift)."""
    last = T - round(stop_time * T)
    return (T - np.arange(last + 1)) / T


def _xprev(denoiser, x, t, dt):
    fn = getattr(denoiser, "xprev", None)
    if fn is not None:
        return fn(x, t, dt)
    c = dt / t
    return c * denoiser(x, t) + (1.0 - c) * x


def _check_step(t, dt):
    if not 0.0 < dt <= t:
        raise DomainError(f"need 0 < dt <= t, got dt={dt}, t={t}")


def _noise(x, rng, eps):
    if eps is not None:
        return np.broadcast_to(np.asarray(eps, dtype=float), np.shape(x))
    return as_stream(rng).normal(np.shape(x))


def ddim_lambda(sched: Schedule, t: float, dt: float) -> float:
    sig_t = sched.sigma(t)
    return sig_t / (sched.sigma(t - dt) + sig_t)


def ddpm_step(x, t, dt, denoiser, sched: Schedule, rng=None, eps=None):
    """``x_{t-dt} = E[x_{t-dt} | x_t] + sigma_q sqrt(dt) eps``."""
    _check_step(t, dt)
    x = np.asarray(x, dtype=float)
    return _xprev(denoiser, x, t, dt) + sched.sigma_q * math.sqrt(dt) * _noise(x, rng, eps)


def ddpm_x0_step(x, t, dt, denoiser, sched: Schedule, rng=None, eps=None):
    """Variance-reduced form driven by an x0 prediction:
    ``x + (dt/t)(g(x, t) - x) + sigma_q sqrt(dt) eps``."""
    _check_step(t, dt)
    x = np.asarray(x, dtype=float)
    eta_hat = denoiser(x, t) - x
    return x + (1.0 / t) * eta_hat * dt + sched.sigma_q * math.sqrt(dt) * _noise(x, rng, eps)


def ddim_step(x, t, dt, denoiser, sched: Schedule):
    """Deterministic step ``x + lam (E[x_{t-dt} | x_t] - x)``,
    ``lam = sigma_t / (sigma_{t-dt} + sigma_t)``."""
    _check_step(t, dt)
    x = np.asarray(x, dtype=float)
    lam = ddim_lambda(sched, t, dt)
    return x + lam * (_xprev(denoiser, x, t, dt) - x)


def score_from_denoiser(denoiser, sched: Schedule, x, t):
    s, sig = sched.s(t), sched.sigma(t)
    return (s * denoiser(x, t) - x) / (s * sig) ** 2


def _fg(sched, t):
    try:
        return sched.f(t), sched.g(t)
    except DomainError as exc:
        raise DomainError(f"{exc}; choose stop_time > 0") from None


def sde_step(x, t, dt, denoiser, sched: Schedule, rng=None, eps=None):
    """Euler-Maruyama step of ``dx = (f x - g^2 score) dt + g dw`` run backwards."""
    _check_step(t, dt)
    x = np.asarray(x, dtype=float)
    f, g = _fg(sched, t)
    drift = f * x - g**2 * score_from_denoiser(denoiser, sched, x, t)
    return x - drift * dt + g * math.sqrt(dt) * _noise(x, rng, eps)


def pf_ode_field(x, t, denoiser, sched: Schedule):
    """Probability-flow drift ``f x - g^2 score / 2`` (forward-time derivative)."""
    f, g = _fg(sched, t)
    return f * x - 0.5 * g**2 * score_from_denoiser(denoiser, sched, x, t)


def ode_step(x, t, dt, denoiser, sched: Schedule, method: str = "euler"):
    """One backward step of the probability-flow ODE (Euler or Heun)."""
    _check_step(t, dt)
    x = np.asarray(x, dtype=float)
    d1 = pf_ode_field(x, t, denoiser, sched)
    pred = x - dt * d1
    if method == "euler":
        return pred
    if method != "heun":
        raise ConfigError(f"unknown ODE method {method!r}")
    if t - dt <= 0.0:
        raise DomainError("Heun evaluates the field at t - dt; it must be > 0 (raise stop_time)")
    d2 = pf_ode_field(pred, t - dt, denoiser, sched)
    return x - 0.5 * dt * (d1 + d2)


def _infer_dim(config, x1):
    if x1 is not None:
        return np.asarray(x1).shape[-1]
    if config.dim is not None:
        return config.dim
    return getattr(config.denoiser, "dim", 1)


def _run(config: SamplerConfig, rng, x1, step: Callable) -> Trajectory:
    rng = as_stream(rng)
    sched = config.schedule
    times = config.grid()
    if x1 is None:
        x = sched.terminal_std() * rng.normal((config.n, _infer_dim(config, None)))
    else:
        x = np.atleast_2d(np.array(x1, dtype=float))
    if config.keep is None:
        keep = np.ones(len(times), dtype=bool)
    else:
        keep = np.zeros(len(times), dtype=bool)
        keep[[0, -1]] = True
        for tk in config.keep:
            hit = np.flatnonzero(np.abs(times - tk) < 1e-12)
            if hit.size == 0:
                raise ConfigError(f"requested time {tk} is not on the sampling grid")
            keep[hit] = True
    states = [x.copy()]
    dt = config.dt
    for k in range(len(times) - 1):
        x = step(x, times[k], dt, rng)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after the step from t={times[k]}", t=times[k])
        if keep[k + 1]:
            states.append(x.copy())
    return Trajectory(times[keep], np.stack(states), rng.seed, config.method, sched.describe())


def ddpm_sample(config: SamplerConfig, rng, x1=None) -> Trajectory:
    den, sched = config.denoiser, config.schedule
    return _run(config, rng, x1, lambda x, t, dt, r: ddpm_step(x, t, dt, den, sched, r))


def ddpm_x0_sample(config: SamplerConfig, rng, x1=None) -> Trajectory:
    den, sched = config.denoiser, config.schedule
    return _run(config, rng, x1, lambda x, t, dt, r: ddpm_x0_step(x, t, dt, den, sched, r))


def ddim_sample(config: SamplerConfig, rng=None, x1=None) -> Trajectory:
    den, sched = config.denoiser, config.schedule
    return _run(config, rng, x1, lambda x, t, dt, r: ddim_step(x, t, dt, den, sched))


def reverse_sde_sample(config: SamplerConfig, rng, x1=None) -> Trajectory:
    den, sched = config.denoiser, config.schedule
    return _run(config, rng, x1, lambda x, t, dt, r: sde_step(x, t, dt, den, sched, r))


def pf_ode_sample(config: SamplerConfig, rng=None, x1=None, method: str | None = None) -> Trajectory:
    if method is None:
        method = "heun" if config.method == "ode-heun" else "euler"
    den, sched = config.denoiser, config.schedule
    return _run(config, rng, x1, lambda x, t, dt, r: ode_step(x, t, dt, den, sched, method))


_DISPATCH = {
    "ddpm": ddpm_sample,
    "ddpm-x0": ddpm_x0_sample,
    "ddim": ddim_sample,
    "sde-euler-maruyama": reverse_sde_sample,
    "ode-euler": pf_ode_sample,
    "ode-heun": pf_ode_sample,
}


def sample(config: SamplerConfig, rng, x1=None) -> Trajectory:
    """Run the sampler named by ``config.method``."""
    return _DISPATCH[config.method](config, rng, x1)
