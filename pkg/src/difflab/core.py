"""Target/base distributions, toy datasets and the forward noising process.

States are plain float64 numpy arrays: a single point has shape ``(d,)``, a
batch of points ``(n, d)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .rng import RngStream, as_stream
from .schedule import Schedule

SPIRAL_THETA_MIN = 0.5 * math.pi
SPIRAL_THETA_MAX = 3.0 * math.pi
ANNULUS_INNER = 1.5
ANNULUS_OUTER = 2.0


def as_points(x, d=None) -> np.ndarray:
    """Coerce scalars, ``(d,)`` and ``(n, d)`` inputs to a float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if d is not None and x.shape[-1] != d:
        raise ConfigError(f"expected points of dimension {d}, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class DiracMixture:
    """Finite-atom distribution ``sum_i w_i delta_{a_i}``."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise ConfigError("a mixture needs at least one atom")
        if weights.shape[0] != atoms.shape[0]:
            raise ConfigError("one weight per atom is required")
        if not np.all(np.isfinite(atoms)):
            raise ConfigError("atoms must be finite")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be non-negative and sum to 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms) -> DiracMixture:
        atoms = np.asarray(atoms, dtype=float)
        k = atoms.shape[0]
        return cls(atoms, np.full(k, 1.0 / k))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return self.atoms.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def sample(self, n: int, rng) -> np.ndarray:
        idx = as_stream(rng).choice(self.weights, n)
        return self.atoms[idx].copy()

    def translated(self, shift) -> DiracMixture:
        return DiracMixture(self.atoms + np.asarray(shift, dtype=float), self.weights)

    def nearest_distance(self, x) -> np.ndarray:
        """Euclidean distance from each point of ``x`` to its nearest atom."""
        x = as_points(x, self.dim).reshape(-1, self.dim)
        d2 = ((x[:, None, :] - self.atoms[None, :, :]) ** 2).sum(-1)
        return np.sqrt(d2.min(axis=1))

    def nearest_index(self, x) -> np.ndarray:
        x = as_points(x, self.dim).reshape(-1, self.dim)
        d2 = ((x[:, None, :] - self.atoms[None, :, :]) ** 2).sum(-1)
        return d2.argmin(axis=1)


@dataclass(frozen=True)
class BaseDistribution:
    """Source distribution ``q`` for flows.

    kinds: ``gaussian`` (isotropic, ``variance``), ``annulus`` (uniform on a
    2-D ring) and ``dirac`` (a :class:`DiracMixture`).
    """

    kind: str = "gaussian"
    variance: float = 1.0
    r_inner: float = ANNULUS_INNER
    r_outer: float = ANNULUS_OUTER
    mixture: DiracMixture | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "annulus", "dirac"):
            raise ConfigError(f"unknown base distribution {self.kind!r}")
        if self.kind == "gaussian" and not self.variance > 0:
            raise ConfigError("variance must be positive")
        if self.kind == "annulus" and not 0 < self.r_inner < self.r_outer:
            raise ConfigError("annulus needs 0 < r_inner < r_outer")
        if self.kind == "dirac" and self.mixture is None:
            raise ConfigError("dirac base needs a mixture")

    def sample(self, n: int, d: int, rng) -> np.ndarray:
        rng = as_stream(rng)
        if self.kind == "gaussian":
            return math.sqrt(self.variance) * rng.normal((n, d))
        if self.kind == "annulus":
            if d != 2:
                raise ConfigError("annulus base is two-dimensional")
            u = rng.uniform((2, n))
            r = np.sqrt(self.r_inner**2 + u[0] * (self.r_outer**2 - self.r_inner**2))
            th = 2.0 * np.pi * u[1]
            return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        return self.mixture.sample(n, rng)

    def log_density(self, x) -> np.ndarray:
        """Log density at each row of ``x``; ``-inf`` off the support."""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.kind == "gaussian":
            return -0.5 * (x**2).sum(-1) / self.variance - 0.5 * d * math.log(2 * math.pi * self.variance)
        if self.kind == "annulus":
            r2 = (x**2).sum(-1)
            inside = (r2 >= self.r_inner**2) & (r2 <= self.r_outer**2)
            area = math.pi * (self.r_outer**2 - self.r_inner**2)
            return np.where(inside, -math.log(area), -np.inf)
        raise ConfigError("a Dirac base has no density")


def spiral_point(theta) -> np.ndarray:
    """Point on the declared Archimedean arc ``(theta/theta_max) (cos, sin)``."""
    theta = np.asarray(theta, dtype=float)
    r = theta / SPIRAL_THETA_MAX
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def spiral_distance(x, sweep: int = 200_001) -> np.ndarray:
    """Distance of each 2-D point to the spiral arc, by dense parameter sweep."""
    x = as_points(x, 2).reshape(-1, 2)
    curve = spiral_point(np.linspace(SPIRAL_THETA_MIN, SPIRAL_THETA_MAX, sweep))
    out = np.empty(len(x))
    for lo in range(0, len(x), 64):
        chunk = x[lo:lo + 64]
        d2 = ((chunk[:, None, :] - curve[None, :, :]) ** 2).sum(-1)
        out[lo:lo + 64] = np.sqrt(d2.min(axis=1))
    return out


def make_dataset(kind: str, n: int = 2, seed: int = 0, *, a=-1.0, b=1.0, atoms=None,
                 r_inner=ANNULUS_INNER, r_outer=ANNULUS_OUTER) -> DiracMixture:
    """Equal-weight toy targets: ``spiral``, ``annulus-atoms``, ``two-point`` or ``custom-atoms``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = RngStream(seed)
    if kind == "spiral":
        theta = SPIRAL_THETA_MIN + (SPIRAL_THETA_MAX - SPIRAL_THETA_MIN) * rng.uniform(n)
        return DiracMixture.uniform(spiral_point(theta))
    if kind == "annulus-atoms":
        pts = BaseDistribution("annulus", r_inner=r_inner, r_outer=r_outer).sample(n, 2, rng)
        return DiracMixture.uniform(pts)
    if kind == "two-point":
        if n != 2:
            raise ConfigError("two-point dataset has exactly 2 atoms")
        pts = np.stack([np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))])
        return DiracMixture.uniform(pts)
    if kind == "custom-atoms":
        if atoms is None:
            raise ConfigError("custom-atoms needs explicit atoms")
        return DiracMixture.uniform(atoms)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def forward_sample(x0, t: float, sched: Schedule, rng) -> np.ndarray:
    """Draw ``x_t = s(t) x0 + s(t) sigma(t) eps`` for each row of ``x0``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} is outside [0, 1]")
    x0 = np.asarray(x0, dtype=float)
    s, sig = sched.s(t), sched.sigma(t)
    eps = as_stream(rng).normal(x0.shape)
    return s * x0 + s * sig * eps


@dataclass(frozen=True, eq=False)
class ForwardTrajectory:
    times: np.ndarray
    states: np.ndarray  # (T+1, ..., d)
    increments: np.ndarray  # (T, ..., d)


def forward_chain(x0, T: int, sched: Schedule, rng) -> ForwardTrajectory:
    """Discrete VE chain ``x_{t+dt} = x_t + eta_t`` with ``eta_t ~ N(0, sigma_q^2 dt)``."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not sched.is_ve:
        raise ConfigError("the incremental chain is VE-only; use forward_sample for other schedules")
    x0 = np.asarray(x0, dtype=float)
    rng = as_stream(rng)
    dt = 1.0 / T
    inc = sched.sigma_q * math.sqrt(dt) * rng.normal((T,) + x0.shape)
    states = np.empty((T + 1,) + x0.shape)
    states[0] = x0
    for k in range(T):
        states[k + 1] = states[k] + inc[k]
    times = np.arange(T + 1) / T
    return ForwardTrajectory(times, states, inc)


def write_dataset(path, mix: DiracMixture) -> None:
    with open(path, "w") as fh:
        for w, a in zip(mix.weights, mix.atoms):
            fh.write(json.dumps({"w": float(w), "a": [float(v) for v in a]}) + "\n")


def read_dataset(path) -> DiracMixture:
    weights, atoms = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            weights.append(float(rec["w"]))
            atoms.append([float(v) for v in rec["a"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: malformed atom record ({exc})") from None
    if not atoms:
        raise ConfigError(f"{path}: no atoms")
    if len({len(a) for a in atoms}) != 1:
        raise ConfigError(f"{path}: atoms have inconsistent dimension")
    return DiracMixture(np.array(atoms), np.array(weights))
