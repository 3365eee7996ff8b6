"""Flow matching with pointwise flows, couplings and marginal flows.

Conventions: time runs from the source (``t = 1``, ``x_1 ~ q``) to the target
(``t = 0``). Velocities point towards the data, so a sampler step reads
``x_{t-dt} = x_t + v_t(x_t) dt`` and a trajectory obeys ``dx/dt = -v_t(x)``.

Both built-in pointwise flows have affine trajectories
``x_t = alpha(t) x_0 + beta(t) x_1``; this is what makes the marginal
velocity of a Dirac-mixture target computable in closed form: given
``x_t``, the pointwise velocity is affine in ``x_0``, so its conditional
expectation only needs ``E[x_0 | x_t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import BaseDistribution, DiracMixture, as_points
from .errors import ConfigError, DomainError, NumericalError
from .oracle import ExactDenoiser, gaussian_loglik, softmax_rows
from .rng import as_stream
from .samplers import Trajectory, ddim_step, time_grid
from .schedule import Schedule


class PointwiseFlow:
    """Flow transporting a single source point ``x1`` to a single target ``x0``."""

    name = "pointwise"

    def trajectory(self, x1, x0, t):
        raise NotImplementedError

    def velocity(self, x1, x0, t):
        raise NotImplementedError

    def check_consistency(self, x1, x0, ts=(0.2, 0.5, 0.8), h=1e-6, tol=1e-8):
        """Boundary conditions and ``velocity == -d/dt trajectory`` (central differences).

        Returns the worst absolute mismatch; raises :class:`ConfigError` above ``tol``
        (the finite-difference tolerance is relative to the trajectory scale).
        """
        x1 = np.asarray(x1, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        worst = max(np.abs(self.trajectory(x1, x0, 1.0) - x1).max(),
                    np.abs(self.trajectory(x1, x0, 0.0) - x0).max())
        scale = 1.0 + max(np.abs(x1).max(), np.abs(x0).max())
        for t in ts:
            fd = -(self.trajectory(x1, x0, t + h) - self.trajectory(x1, x0, t - h)) / (2 * h)
            worst = max(worst, np.abs(fd - self.velocity(x1, x0, t)).max() / scale)
        if worst > tol:
            raise ConfigError(f"{self.name}: trajectory/velocity mismatch {worst:.3g}")
        return worst


class AffineFlow(PointwiseFlow):
    """``x_t = alpha(t) x0 + beta(t) x1`` with ``alpha(0) = beta(1) = 1``."""

    def coefficients(self, t):
        """Return ``alpha, beta, alpha', beta'`` at ``t``."""
        raise NotImplementedError

    def trajectory(self, x1, x0, t):
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t={t} is outside [0, 1]")
        if t == 1.0:
            return np.array(x1, dtype=float)
        if t == 0.0:
            return np.array(x0, dtype=float)
        a, b, _, _ = self.coefficients(t)
        return a * np.asarray(x0, dtype=float) + b * np.asarray(x1, dtype=float)

    def velocity(self, x1, x0, t):
        _, _, da, db = self.coefficients(t)
        return -(da * np.asarray(x0, dtype=float) + db * np.asarray(x1, dtype=float))

    def velocity_at(self, xt, x0, t):
        """Pointwise velocity written in terms of the current state ``x_t``."""
        a, b, da, db = self.coefficients(t)
        x0 = np.asarray(x0, dtype=float)
        x1 = (np.asarray(xt, dtype=float) - a * x0) / b
        return -(da * x0 + db * x1)


class LinearFlow(AffineFlow):
    """Straight line ``x_t = t x1 + (1 - t) x0`` with velocity ``x0 - x1``."""

    name = "linear"

    def coefficients(self, t):
        return 1.0 - t, t, -1.0, 1.0


class SqrtFlow(AffineFlow):
    """DDIM pointwise flow ``x_t = x0 + (x1 - x0) sqrt(t)``.

    Its velocity ``(x0 - x1) / (2 sqrt t)`` equals ``(x0 - x_t) / (2 t)`` along
    the trajectory.
    """

    name = "ddim-sqrt"

    def coefficients(self, t):
        r = math.sqrt(t)
        return 1.0 - r, r, -0.5 / r, 0.5 / r


class CustomFlow(PointwiseFlow):
    """User-supplied ``trajectory(x1, x0, t)``/``velocity(x1, x0, t)`` pair, validated on creation."""

    name = "custom"

    def __init__(self, trajectory: Callable, velocity: Callable, probe=(1.0, 0.0)):
        self._traj = trajectory
        self._vel = velocity
        self.check_consistency(np.atleast_1d(probe[0]), np.atleast_1d(probe[1]))

    def trajectory(self, x1, x0, t):
        return self._traj(np.asarray(x1, float), np.asarray(x0, float), t)

    def velocity(self, x1, x0, t):
        return self._vel(np.asarray(x1, float), np.asarray(x0, float), t)


FLOWS = {"linear": LinearFlow, "ddim-sqrt": SqrtFlow}


def make_flow(name: str) -> PointwiseFlow:
    try:
        return FLOWS[name]()
    except KeyError:
        raise ConfigError(f"unknown pointwise flow {name!r}; expected one of {sorted(FLOWS)}") from None


def run_flow(flow: PointwiseFlow, x1, x0, t: float):
    """Position at time ``t`` of the pointwise flow started at ``x1`` (closed form)."""
    return flow.trajectory(x1, x0, t)


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint law of ``(x1, x0)``.

    ``independent``: ``x0 ~ target``, ``x1 ~ base`` independently.
    ``diffusion``: ``x0 ~ target``, ``x1 = x0 + N(0, sigma_q^2 I)``.
    """

    kind: str
    target: DiracMixture
    base: BaseDistribution | None = None
    sigma_q: float = 1.0

    def __post_init__(self):
        if self.kind not in ("independent", "diffusion"):
            raise ConfigError(f"unknown coupling {self.kind!r}")
        if self.kind == "independent" and self.base is None:
            object.__setattr__(self, "base", BaseDistribution("gaussian", self.sigma_q**2))

    def sample(self, n: int, rng):
        """Draw ``n`` pairs; returns ``(x1, x0)``."""
        rng = as_stream(rng)
        x0 = self.target.sample(n, rng)
        if self.kind == "diffusion":
            x1 = x0 + self.sigma_q * rng.normal(x0.shape)
        else:
            x1 = self.base.sample(n, self.target.dim, rng)
        return x1, x0

    def sample_source(self, n: int, rng):
        """Draws from the ``x1`` marginal."""
        return self.sample(n, rng)[0]


@dataclass(frozen=True, eq=False)
class FlowSpec:
    """Pointwise flow + coupling + velocity source.

    ``velocity`` is ``"oracle"`` (closed-form marginal flow, needs a Dirac
    target) or a callable ``v(x, t)``, e.g. a trained network.
    """

    flow: PointwiseFlow
    coupling: Coupling
    velocity: str | Callable = "oracle"

    def __post_init__(self):
        if self.velocity == "oracle" and not isinstance(self.flow, AffineFlow):
            raise ConfigError("the analytic marginal flow needs a built-in (affine) pointwise flow")

    @property
    def dim(self) -> int:
        return self.coupling.target.dim

    def field(self, x, t):
        if callable(self.velocity):
            return self.velocity(x, t)
        return marginal_velocity(self, x, t)


def conditional_loglik(spec: FlowSpec, x, t: float) -> np.ndarray:
    """``log w_i + log p(x_t = x | x_0 = a_i)`` (up to a shared constant), shape (n, k)."""
    a, b, _, _ = spec.flow.coefficients(t)
    cp = spec.coupling
    mix = cp.target
    if cp.kind == "diffusion":
        # x_t = x0 + b * sigma_q * eps since a + b = 1
        return gaussian_loglik(mix, x, 1.0, (b * cp.sigma_q) ** 2)
    base = cp.base
    if base.kind == "gaussian":
        return gaussian_loglik(mix, x, a, b * b * base.variance)
    if base.kind == "annulus":
        with np.errstate(divide="ignore"):
            logw = np.log(mix.weights)
        u = (x[:, None, :] - a * mix.atoms[None, :, :]) / b
        return logw[None, :] + base.log_density(u)
    raise ConfigError("the analytic marginal flow needs a base distribution with a density")


def posterior_mean(spec: FlowSpec, x, t: float) -> np.ndarray:
    xb = as_points(x, spec.dim).reshape(-1, spec.dim)
    if len(spec.coupling.target) == 1:
        return np.repeat(spec.coupling.target.atoms, len(xb), axis=0)
    try:
        r = softmax_rows(conditional_loglik(spec, xb, t))
    except DomainError:
        raise NumericalError(f"state left the support of every conditional at t={t}", t=t) from None
    return r @ spec.coupling.target.atoms


def marginal_velocity(spec: FlowSpec, x, t: float) -> np.ndarray:
    """Closed-form marginal flow ``E[pointwise velocity | x_t = x]`` for a Dirac target."""
    if not 0.0 < t < 1.0 + 1e-15:
        raise DomainError(f"t={t} is outside (0, 1]")
    if not isinstance(spec.flow, AffineFlow):
        raise ConfigError("unsupported pointwise flow for the analytic marginal flow")
    x = np.asarray(x, dtype=float)
    shape = x.shape if x.ndim else (1,)
    m = posterior_mean(spec, x, t).reshape(shape)
    return spec.flow.velocity_at(x.reshape(shape), m, t)


def per_atom_velocities(spec: FlowSpec, x, t: float):
    """Posterior weights and single-atom fields ``v^[a_i](x)``; shapes (n, k), (n, k, d)."""
    xb = as_points(x, spec.dim).reshape(-1, spec.dim)
    r = softmax_rows(conditional_loglik(spec, xb, t))
    atoms = spec.coupling.target.atoms
    v = spec.flow.velocity_at(xb[:, None, :], atoms[None, :, :], t)
    return r, v


def flow_sample(spec: FlowSpec, T: int, rng, n: int = 1, x1=None, stop_time: float | None = None,
                keep_all: bool = True) -> Trajectory:
    """Euler integration ``x_{t-dt} = x_t + v(x_t, t) dt`` from ``x1 ~ q``.

    ``stop_time`` defaults to 0 for the linear flow (its Euler field stays
    bounded on the last step) and to ``1/T`` for the DDIM flow.
    """
    rng = as_stream(rng)
    if stop_time is None:
        stop_time = 1.0 / T if isinstance(spec.flow, SqrtFlow) else 0.0
    times = time_grid(T, stop_time)
    x = spec.coupling.sample_source(n, rng) if x1 is None else np.atleast_2d(np.array(x1, dtype=float))
    dt = 1.0 / T
    states = [x.copy()]
    for k in range(len(times) - 1):
        x = x + spec.field(x, times[k]) * dt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after the step from t={times[k]}", t=times[k])
        if keep_all or k == len(times) - 2:
            states.append(x.copy())
    if not keep_all:
        times = times[[0, -1]]
    return Trajectory(times, np.stack(states), rng.seed, f"flow-{spec.flow.name}")


@dataclass
class ReparamReport:
    steps: int
    max_gap: float
    ddim_states: np.ndarray
    linear_states: np.ndarray
    times: np.ndarray


def ddim_vs_linear_reparam(target: DiracMixture, x_star, T: int, sigma_q: float = 1.0) -> ReparamReport:
    """Compare the DDIM trajectory ``y_t`` with the linear marginal flow ``z_s`` at ``s = sqrt(t)``.

    ``y`` follows DDIM steps on the uniform t-grid (VE, exact denoiser); ``z``
    follows Euler steps of the linear/diffusion-coupling marginal flow on the
    uniform s-grid, and is then resampled at ``s = sqrt(t_k)`` by linear
    interpolation.
    """
    x_star = as_points(x_star, target.dim).reshape(1, target.dim)
    sched = Schedule("ve", sigma_q=sigma_q, steps=T)
    den = ExactDenoiser(target, sched)
    times = time_grid(T)
    y = np.empty((T + 1, target.dim))
    y[0] = x_star[0]
    x = x_star
    for k in range(T):
        x = ddim_step(x, times[k], 1.0 / T, den, sched)
        y[k + 1] = x[0]
    spec = FlowSpec(LinearFlow(), Coupling("diffusion", target, sigma_q=sigma_q))
    z = flow_sample(spec, T, None, x1=x_star).states[:, 0, :]
    s_grid = times[::-1]
    z_inc = z[::-1]
    z_at = np.stack([np.interp(np.sqrt(times), s_grid, z_inc[:, j]) for j in range(target.dim)], axis=1)
    gap = float(np.sqrt(((y - z_at) ** 2).sum(axis=1)).max())
    return ReparamReport(T, gap, y, z_at, times)
