"""Noise/scaling schedules.

A schedule describes the forward process ``x_t = s(t) x_0 + s(t) sigma(t) eps``
or equivalently the SDE ``dx = f(t) x dt + g(t) dw``. The two forms are
related by

    f(t) = s'(t) / s(t),            g(t) = s(t) sqrt(2 sigma'(t) sigma(t)),
    s(t) = exp(int_0^t f),          sigma(t)^2 = int_0^t g^2 / s^2.

Here ``f`` is reported as the coefficient of the (linear) drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, DomainError, NumericalError

KINDS = ("ve", "vp", "karras", "custom")


class ScheduleValues(NamedTuple):
    s: float
    sigma: float
    f: float
    g: float


@dataclass(frozen=True)
class Schedule:
    """Immutable schedule description.

    ``kind`` is one of ``ve``, ``vp``, ``karras`` or ``custom``. ``steps`` is
    the number of discretisation steps T (so ``dt = 1/T``). A custom schedule
    is given by drift/diffusion callables ``f_fn``/``g_fn``; its ``s`` and
    ``sigma`` are obtained by quadrature.
    """

    kind: str = "ve"
    sigma_q: float = 1.0
    steps: int = 1000
    beta_min: float = 0.1
    beta_max: float = 20.0
    f_fn: Callable | None = field(default=None, compare=False, repr=False)
    g_fn: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps}")
        if not self.sigma_q > 0:
            raise ConfigError("sigma_q must be positive")
        if kind == "vp" and not (0 <= self.beta_min <= self.beta_max and self.beta_max > 0):
            raise ConfigError("VP schedule needs 0 <= beta_min <= beta_max, beta_max > 0")
        if kind == "custom" and (self.f_fn is None or self.g_fn is None):
            raise ConfigError("custom schedule needs both f_fn and g_fn")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def is_ve(self) -> bool:
        return self.kind == "ve"

    def describe(self) -> dict:
        d = {"kind": self.kind, "sigma_q": self.sigma_q, "steps": self.steps}
        if self.kind == "vp":
            d.update(beta_min=self.beta_min, beta_max=self.beta_max)
        return d

    def with_steps(self, steps: int) -> Schedule:
        return Schedule(self.kind, self.sigma_q, steps, self.beta_min, self.beta_max, self.f_fn, self.g_fn)

    # VP helpers
    def beta(self, t):
        return (self.beta_max - self.beta_min) * t + self.beta_min

    def alpha(self, t):
        return 0.5 * (self.beta_max - self.beta_min) * t**2 + self.beta_min * t

    def s(self, t):
        t = _check_t(t)
        if self.kind == "vp":
            return np.exp(-0.5 * self.alpha(t))
        if self.kind == "custom":
            return fg_to_s_sigma(self.f_fn, self.g_fn, t)[0]
        return np.ones_like(t) if isinstance(t, np.ndarray) else 1.0

    def sigma(self, t):
        t = _check_t(t)
        if self.kind == "ve":
            return self.sigma_q * np.sqrt(t)
        if self.kind == "karras":
            return self.sigma_q * t
        if self.kind == "vp":
            return np.sqrt(np.expm1(self.alpha(t)))
        return fg_to_s_sigma(self.f_fn, self.g_fn, t)[1]

    def f(self, t):
        t = _check_t(t)
        if self.kind == "vp":
            return -0.5 * self.beta(t)
        if self.kind == "custom":
            return _finite("f", self.f_fn(t), t)
        return np.zeros_like(t) if isinstance(t, np.ndarray) else 0.0

    def g(self, t):
        t = _check_t(t)
        if self.kind == "ve":
            return self.sigma_q * np.ones_like(t) if isinstance(t, np.ndarray) else self.sigma_q
        if self.kind == "karras":
            return self.sigma_q * np.sqrt(2.0 * t)
        if self.kind == "vp":
            return np.sqrt(self.beta(t))
        return _finite("g", self.g_fn(t), t)

    def eval(self, t) -> ScheduleValues:
        return ScheduleValues(self.s(t), self.sigma(t), self.f(t), self.g(t))

    def marginal_std(self, t):
        """Standard deviation of ``x_t`` around ``s(t) x_0``."""
        return self.s(t) * self.sigma(t)

    def terminal_std(self) -> float:
        return float(self.marginal_std(1.0))


def _check_t(t):
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return arr if arr.ndim else float(arr)


def _finite(name, value, t):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{name}(t) is singular at t={t}")
    return value


def simpson(y, h, axis=-1):
    """Composite Simpson rule on equally spaced samples (odd sample count)."""
    y = np.moveaxis(np.asarray(y, dtype=float), axis, -1)
    if y.shape[-1] % 2 == 0:
        raise ValueError("Simpson's rule needs an even number of panels")
    return h / 3.0 * (y[..., 0] + y[..., -1] + 4.0 * y[..., 1:-1:2].sum(-1) + 2.0 * y[..., 2:-1:2].sum(-1))


def _call_vec(fn, x):
    out = np.asarray(fn(x), dtype=float)
    if out.shape != np.shape(x):
        out = np.broadcast_to(out, np.shape(x)) if out.ndim == 0 else np.vectorize(fn, otypes=[float])(x)
    return out


def fg_to_s_sigma(f: Callable, g: Callable, t, panels: int = 1024):
    """Recover ``(s(t), sigma(t))`` from drift coefficient ``f`` and diffusion ``g``.

    Both integrals are evaluated with composite Simpson (``panels`` even).
    ``s`` at every outer node needs its own inner integral of ``f``; these are
    computed together on a 2-D node grid.
    """
    if panels % 2:
        raise ValueError("panels must be even")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    s_out = np.empty_like(t_arr)
    sig_out = np.empty_like(t_arr)
    u = np.linspace(0.0, 1.0, panels + 1)
    for i, ti in enumerate(t_arr):
        if ti == 0.0:
            s_out[i], sig_out[i] = 1.0, 0.0
            continue
        xi = ti * u  # outer nodes
        inner = xi[:, None] * u[None, :]  # nodes of int_0^{xi_j} f
        fv = _call_vec(f, inner)
        gv = _call_vec(g, xi)
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(gv))):
            raise NumericalError(f"non-finite integrand sample on [0, {ti}]", t=ti)
        log_s = simpson(fv, xi / panels, axis=1)
        integrand = gv**2 * np.exp(-2.0 * log_s)
        s_out[i] = np.exp(log_s[-1])
        sig_out[i] = np.sqrt(simpson(integrand, ti / panels))
    if np.ndim(t) == 0:
        return float(s_out[0]), float(sig_out[0])
    return s_out, sig_out
