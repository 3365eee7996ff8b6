"""Regression losses for every parametrisation and the Adam training loop.

Each loss draws ``(input state, time, regression target)`` triples and scores
a model by the per-sample mean of ``||model(x, t) - target||^2``:

========== ===================================== ==========================
mode       input                                 target
========== ===================================== ==========================
xprev      ``x_{t+dt}`` at time ``t + dt`` (VE)  ``x_t``
x0         ``x_t = s x0 + s sigma eps``          ``x0``
eps        ``x_t``                               ``eps``
v          ``x_t``                               ``s eps - sigma x0``
flow-linear ``t x1 + (1 - t) x0``                ``x0 - x1``
========== ===================================== ==========================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BaseDistribution, DiracMixture
from .errors import ConfigError, NumericalError
from .mlp import Adam, Mlp
from .rng import as_stream
from .schedule import Schedule

MODES = ("xprev", "x0", "eps", "v", "flow-linear")
MIN_SIGMA = 1e-6
DIVERGENCE = 1e6


@dataclass(frozen=True)
class LossSpec:
    mode: str
    schedule: Schedule = field(default_factory=Schedule)
    base: BaseDistribution | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "xprev" and not self.schedule.is_ve:
            raise ConfigError("xprev loss is defined for the VE schedule")
        if self.base is None:
            object.__setattr__(self, "base", BaseDistribution("gaussian", self.schedule.sigma_q**2))

    def describe(self) -> dict:
        return {"mode": self.mode, "schedule": self.schedule.describe(),
                "base": {"kind": self.base.kind, "variance": self.base.variance}}


@dataclass(frozen=True, eq=False)
class Batch:
    x: np.ndarray
    t: np.ndarray
    target: np.ndarray
    x0: np.ndarray
    eps: np.ndarray


def _draw_times(spec, n, rng):
    t = rng.uniform(n)
    if spec.mode in ("eps", "v"):
        sched = spec.schedule
        bad = sched.sigma(t) < MIN_SIGMA
        while bad.any():
            t[bad] = rng.uniform(int(bad.sum()))
            bad = sched.sigma(t) < MIN_SIGMA
    return t


def draw_batch(spec: LossSpec, data: DiracMixture, n: int, rng) -> Batch:
    rng = as_stream(rng)
    sched = spec.schedule
    x0 = data.sample(n, rng)
    t = _draw_times(spec, n, rng)
    tc = t[:, None]
    eps = rng.normal(x0.shape)
    if spec.mode == "flow-linear":
        x1 = spec.base.sample(n, data.dim, rng)
        return Batch(tc * x1 + (1.0 - tc) * x0, t, x0 - x1, x0, x1)
    if spec.mode == "xprev":
        dt = sched.dt
        xt = x0 + sched.sigma_q * np.sqrt(tc) * eps
        x_next = xt + sched.sigma_q * math.sqrt(dt) * rng.normal(x0.shape)
        return Batch(x_next, t + dt, xt, x0, eps)
    s = sched.s(t)[:, None]
    sig = sched.sigma(t)[:, None]
    xt = s * x0 + s * sig * eps
    if spec.mode == "x0":
        target = x0
    elif spec.mode == "eps":
        target = eps
    else:
        target = s * eps - sig * x0
    return Batch(xt, t, target, x0, eps)


def predict(model, x, t):
    """Evaluate ``model`` on a batch where each row has its own time."""
    if isinstance(model, Mlp):
        return model(x, t)
    return np.concatenate([np.asarray(model(x[i:i + 1], float(t[i])), float).reshape(1, -1)
                           for i in range(len(x))])


def per_sample_loss(model, batch: Batch) -> np.ndarray:
    pred = predict(model, batch.x, batch.t)
    return ((pred - batch.target) ** 2).sum(axis=1)


def loss(model, spec: LossSpec, data: DiracMixture, rng, batch_size: int = 128, with_grad: bool = True):
    """Stochastic minibatch loss; with an :class:`Mlp` also its exact gradient.

    Returns ``(loss, flat_grad)``; ``flat_grad`` is ``None`` for plain callables.
    """
    batch = draw_batch(spec, data, batch_size, rng)
    if isinstance(model, Mlp) and with_grad:
        value, gw, gb = model.loss_and_grad(batch.x, batch.t, batch.target)
        grad = Mlp.flatten_grads(gw, gb)
    else:
        value, grad = float(per_sample_loss(model, batch).mean()), None
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss (times {batch.t.min():.4g}..{batch.t.max():.4g})")
    return value, grad


@dataclass
class TrainResult:
    model: Mlp
    curve: list
    optimizer: Adam
    config: dict


def train(model: Mlp, spec: LossSpec, data: DiracMixture, *, lr=1e-3, batches=2000, batch_size=128,
          seed=0, optimizer: Adam | None = None, start_batch: int = 0) -> TrainResult:
    """Adam on the stochastic loss; returns the model (trained in place) and the loss curve.

    A passed ``optimizer`` keeps its moment estimates but takes the new ``lr``.
    The curve is a list of ``{"batch": n, "loss": value}`` records. A loss above
    ``1e6`` aborts with :class:`NumericalError` carrying the partial curve.
    """
    if lr <= 0 or batches < 1 or batch_size < 1:
        raise ConfigError("lr, batches and batch_size must be positive")
    rng = as_stream(seed)
    opt = optimizer or Adam(model.n_params, lr=lr)
    opt.lr = lr
    params = model.get_flat()
    curve = []
    for k in range(start_batch, start_batch + batches):
        value, grad = loss(model, spec, data, rng, batch_size)
        curve.append({"batch": k, "loss": value})
        if value > DIVERGENCE:
            err = NumericalError(f"training diverged at batch {k} (loss {value:.3g})")
            err.curve = curve
            raise err
        params = opt.step(params, grad)
        model.set_flat(params)
    config = {"lr": lr, "batches": batches, "batch_size": batch_size, "seed": seed,
              "start_batch": start_batch, **spec.describe()}
    return TrainResult(model, curve, opt, config)


def x0_from_prediction(mode: str, pred, x, t, sched: Schedule):
    """Convert an eps-, v- or x0-prediction at ``(x, t)`` to an estimate of ``x0``."""
    s, sig = sched.s(t), sched.sigma(t)
    if np.ndim(t):
        s, sig = np.asarray(s)[:, None], np.asarray(sig)[:, None]
    if mode == "x0":
        return pred
    if mode == "eps":
        return x / s - sig * pred
    if mode == "v":
        return (x - sig * pred) / (s + sig**2)
    raise ConfigError(f"mode {mode!r} has no direct x0 conversion")


class LearnedDenoiser:
    """Wrap a trained network as a denoiser ``(x, t) -> E[x0 | x_t]``.

    An ``xprev`` network predicts ``E[x_{t-dt} | x_t]`` directly and also
    exposes :meth:`xprev` so DDPM/DDIM use its native output.
    """

    def __init__(self, model: Mlp, spec: LossSpec):
        if spec.mode == "flow-linear":
            raise ConfigError("a flow-matching network is a velocity field, not a denoiser")
        self.model = model
        self.spec = spec
        self.dim = model.dim
        if spec.mode == "xprev":
            self.xprev = self._xprev

    def _xprev(self, x, t, dt):
        if not math.isclose(dt, self.spec.schedule.dt, rel_tol=1e-9):
            raise ConfigError(f"network was trained for dt={self.spec.schedule.dt}, sampler uses dt={dt}")
        return self.model(x, t)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        pred = self.model(x, t)
        if self.spec.mode == "xprev":
            dt = self.spec.schedule.dt
            return x + (t / dt) * (pred - x)
        return x0_from_prediction(self.spec.mode, pred, x, t, self.spec.schedule)


class LearnedVelocity:
    """Wrap a ``flow-linear`` network as a velocity field ``v(x, t)``."""

    def __init__(self, model: Mlp):
        self.model = model
        self.dim = model.dim

    def __call__(self, x, t):
        return self.model(x, t)


def write_curve(path, curve) -> None:
    with open(path, "w") as fh:
        for rec in curve:
            fh.write(json.dumps({"batch": int(rec["batch"]), "loss": float(rec["loss"])}) + "\n")


def read_curve(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
