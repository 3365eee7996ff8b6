"""Named, seeded numerical experiments with machine-readable pass/fail reports.

Every check returns a :class:`CheckReport`. Thresholds are read from the
packaged ``thresholds.json`` table so that tightening a bound is a data
change; a report's ``passed`` flag is a pure function of its measured values
and that table.
"""

from __future__ import annotations

import hashlib
import json
import math
import operator
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy.special import logsumexp
from scipy.stats import ks_2samp

from . import oracle
from .core import DiracMixture, forward_chain, make_dataset, spiral_distance
from .errors import NumericalError
from .flows import (Coupling, FlowSpec, LinearFlow, SqrtFlow, ddim_vs_linear_reparam, flow_sample,
                    marginal_velocity, per_atom_velocities)
from .mlp import Mlp
from .oracle import ExactDenoiser
from .rng import RngStream
from .samplers import (SamplerConfig, ddim_lambda, ddim_sample, ddim_step, ddpm_sample, ddpm_step, ode_step,
                       time_grid)
from .schedule import Schedule
from .train import LearnedDenoiser, LearnedVelocity, LossSpec, x0_from_prediction, train

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "==": operator.eq}


def load_thresholds(path=None) -> dict:
    if path is None:
        text = resources.files("difflab").joinpath("thresholds.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def evaluate(measured: dict, rules: list) -> bool:
    """``True`` iff every ``{"measure", "op", "value"}`` rule holds."""
    for rule in rules:
        value = measured.get(rule["measure"])
        if value is None or not _OPS[rule["op"]](value, rule["value"]):
            return False
    return True


@dataclass
class CheckReport:
    name: str
    inputs_digest: str
    measured: dict
    thresholds: list
    passed: bool
    runtime_s: float
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True)

    def failures(self) -> list:
        return [r for r in self.thresholds if not evaluate(self.measured, [r])]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _digest(inputs: dict) -> str:
    return hashlib.sha256(json.dumps(_jsonable(inputs), sort_keys=True).encode()).hexdigest()[:16]


def _report(name, inputs, measured, start, table, details=None) -> CheckReport:
    measured = dict(measured)
    measured["runtime_s"] = time.perf_counter() - start
    rules = table.get(name, [])
    return CheckReport(name, _digest(inputs), _jsonable(measured), rules, evaluate(measured, rules),
                       measured["runtime_s"], _jsonable(details or {}))


def _two_atom(a=-1.0, b=1.0) -> DiracMixture:
    return make_dataset("two-point", 2, a=a, b=b)


def ks_vs_cdf(samples, cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic against a vectorised CDF."""
    y = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(y)
    F = cdf(y)
    i = np.arange(1, n + 1)
    return float(max((i / n - F).max(), (F - (i - 1) / n).max()))


def _strictly_decreasing(values) -> float:
    return float(all(b < a for a, b in zip(values, values[1:])))


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------- DDIM scaling

def check_ddim_scaling(n_probes=1000, sigma_q=1.0, seed=0, table=None):
    """Single-atom DDIM step against the exact scaling ``a + (sigma_{t-dt}/sigma_t)(x - a)``."""
    table = table or load_thresholds()
    start = time.perf_counter()
    rng = RngStream(seed)
    sched = Schedule("ve", sigma_q=sigma_q)
    worst = 0.0
    for _ in range(n_probes):
        a = 4.0 * rng.normal(2)
        x = a + 3.0 * rng.normal(2)
        t = 1.0 - rng.uniform()  # (0, 1]
        dt = t * (1.0 - rng.uniform())  # (0, t]
        mix = DiracMixture(a[None, :], np.ones(1))
        got = ddim_step(x, t, dt, ExactDenoiser(mix, sched), sched)
        want = a + (sched.sigma(t - dt) / sched.sigma(t)) * (x - a)
        scale = max(np.linalg.norm(want), np.linalg.norm(x), np.linalg.norm(a))
        worst = max(worst, float(np.linalg.norm(got - want) / scale))
    return _report("ddim-scaling", {"n": n_probes, "sigma_q": sigma_q, "seed": seed},
                   {"max_rel_gap": worst}, start, table)


# ------------------------------------------------------- variance reduction

def check_var_reduction(mix=None, sigma_q=1.0, t=0.5, dt=0.01, n_draws=100_000, n_probes=1000,
                        n_bins=60, seed=0, table=None):
    """Identity ``E[x_{t-dt}|x_t] = (dt/t) E[x_0|x_t] + (1 - dt/t) x_t``: exact residual and a
    Monte Carlo regression on forward-chain draws binned by ``x_t``."""
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = mix or _two_atom()
    rng = RngStream(seed)
    T = round(1.0 / dt)
    sched = Schedule("ve", sigma_q=sigma_q, steps=T)

    residual = 0.0
    for _ in range(n_probes):
        x = 3.0 * rng.normal(mix.dim)
        tp = 1.0 - rng.uniform()
        dtp = tp * (1.0 - rng.uniform())
        a = oracle.denoise_xprev(mix, sched, x, tp, dtp)
        b = oracle.denoise_xprev_per_atom(mix, sched, x, tp, dtp)
        c = (dtp / tp) * oracle.denoise_x0(mix, sched, x, tp) + (1 - dtp / tp) * x
        residual = max(residual, float(np.abs(a - b).max()), float(np.abs(a - c).max()))

    x0 = mix.sample(n_draws, rng)
    chain = forward_chain(x0, T, sched, rng)
    k = round(t * T)
    xt = chain.states[k][:, 0]
    y = chain.states[k - 1][:, 0] - xt
    x = (dt / t) * (x0[:, 0] - xt)
    edges = np.quantile(xt, np.linspace(0.0, 1.0, n_bins + 1))
    b = np.clip(np.searchsorted(edges, xt, side="right") - 1, 0, n_bins - 1)
    cnt = np.bincount(b, minlength=n_bins)
    my = np.bincount(b, y, n_bins) / cnt
    mx = np.bincount(b, x, n_bins) / cnt
    slope = float((cnt * mx * my).sum() / (cnt * mx * mx).sum())
    # standard error of the binned through-origin fit
    resid = y - slope * mx[b]
    se = float(math.sqrt((cnt * mx * mx * (np.bincount(b, resid**2, n_bins) / cnt)).sum()) / (cnt * mx * mx).sum())

    # exchangeability of increments: E[eta_i | x_t] for three step indices, same bins
    inc_means = {}
    for i in (0, k // 2, k - 1):
        eta = chain.increments[i][:, 0]
        inc_means[i] = np.bincount(b, eta, n_bins) / cnt
    spread = max(float(np.abs(inc_means[i] - inc_means[0]).max()) for i in inc_means)
    eta_se = sigma_q * math.sqrt(dt) / math.sqrt(cnt.min())
    measured = {"identity_residual": residual, "mc_slope": slope, "mc_slope_se": se,
                "exchangeability_max_gap": spread, "exchangeability_band": 5.0 * math.sqrt(2.0) * eta_se}
    measured["exchangeability_ok"] = float(spread <= measured["exchangeability_band"])
    inputs = {"atoms": mix.atoms, "sigma_q": sigma_q, "t": t, "dt": dt, "n": n_draws, "seed": seed}
    return _report("var-reduction", inputs, measured, start, table)


# ------------------------------------------------------------------ KL lemma

@dataclass(frozen=True)
class GaussianMixture1D:
    means: tuple
    stds: tuple
    weights: tuple

    def logpdf(self, x, extra_var=0.0):
        x = np.asarray(x, dtype=float)
        m, s, w = (np.asarray(v, dtype=float) for v in (self.means, self.stds, self.weights))
        var = s**2 + extra_var
        comp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - (x[..., None] - m) ** 2 / (2 * var)
        return logsumexp(comp, axis=-1)

    def dlogpdf(self, x):
        x = np.asarray(x, dtype=float)
        m, s, w = (np.asarray(v, dtype=float) for v in (self.means, self.stds, self.weights))
        comp = np.log(w) - 0.5 * np.log(2 * np.pi * s**2) - (x[..., None] - m) ** 2 / (2 * s**2)
        r = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
        return (r * (m - x[..., None]) / s**2).sum(-1)


def adaptive_simpson(f, a, b, tol=1e-12, initial=32, max_depth=50):
    """Adaptive Simpson quadrature (Richardson-corrected), started on ``initial`` panels."""
    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        if depth <= 0:
            raise NumericalError(f"adaptive Simpson did not converge on [{lo}, {hi}]")
        if abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return (recurse(lo, mid, fa, flm, fm, left, eps / 2, depth - 1)
                + recurse(mid, hi, fm, frm, fb, right, eps / 2, depth - 1))

    edges = np.linspace(a, b, initial + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        fa, fb, fm = f(lo), f(hi), f(0.5 * (lo + hi))
        total += recurse(lo, hi, fa, fm, fb, simpson(fa, fm, fb, lo, hi), tol / initial, max_depth)
    return total


def kl_gaussian_vs_posterior(target: GaussianMixture1D, z: float, sigma: float, shift=True, tol=1e-12):
    """``KL(N(mu, sigma^2) || p(x_0 | x_0 + N(0, sigma^2) = z))`` by quadrature.

    ``mu = z + sigma^2 d/dz log p(z)`` (or ``z`` when ``shift`` is false).
    """
    mu = z + sigma**2 * float(target.dlogpdf(z)) if shift else z
    log_evidence = float(target.logpdf(z, extra_var=sigma**2))
    c = -0.5 * math.log(2 * math.pi * sigma**2)

    def integrand(x):
        lq = c - (x - mu) ** 2 / (2 * sigma**2)
        lpost = float(target.logpdf(x)) + c - (z - x) ** 2 / (2 * sigma**2) - log_evidence
        return math.exp(lq) * (lq - lpost)

    return adaptive_simpson(integrand, mu - 12.0 * sigma, mu + 12.0 * sigma, tol=tol)


def check_kl_scaling(target=None, z=1.0, sigmas=(0.2, 0.1, 0.05), table=None):
    """Log-log slope of the per-step Gaussian approximation KL in ``sigma`` (expected 4),
    and of the ablation without the score shift (expected 2)."""
    table = table or load_thresholds()
    start = time.perf_counter()
    target = target or GaussianMixture1D((-1.0, 1.0), (1.0, 1.0), (0.5, 0.5))
    sig = np.asarray(sigmas, dtype=float)
    kl = np.array([kl_gaussian_vs_posterior(target, z, s) for s in sig])
    kl_ab = np.array([kl_gaussian_vs_posterior(target, z, s, shift=False) for s in sig])
    measured = {"slope": _fit_slope(sig, kl), "ablated_slope": _fit_slope(sig, kl_ab)}
    inputs = {"target": asdict(target), "z": z, "sigmas": sig}
    return _report("kl-lemma", inputs, measured, start, table, {"kl": kl, "kl_ablated": kl_ab})


# ------------------------------------------------------------ gas lemma

def check_gas_lemma(a=-1.0, b=1.0, sigma_q=1.0, n_probes=100, t=0.5, dt=0.01, seed=0, table=None):
    """DDIM update vs the posterior-weighted sum of the two single-atom updates."""
    table = table or load_thresholds()
    start = time.perf_counter()
    rng = RngStream(seed)
    mix = _two_atom(a, b)
    sched = Schedule("ve", sigma_q=sigma_q)
    lam = ddim_lambda(sched, t, dt)
    x = 2.0 * rng.normal((n_probes, mix.dim))
    combined = lam * (oracle.denoise_xprev(mix, sched, x, t, dt) - x)
    r = oracle.posterior_weights(mix, sched, x, t)
    per_atom = lam * (dt / t) * (mix.atoms[None, :, :] - x[:, None, :])  # v^[a_i] dt
    weighted = np.einsum("nk,nkd->nd", r, per_atom)
    denom = np.maximum(np.abs(combined), np.abs(weighted)).max(axis=1)
    err = np.where(denom > 0, np.abs(combined - weighted).max(axis=1) / np.where(denom > 0, denom, 1), 0.0)
    measured = {"max_rel_error": float(err.max())}
    return _report("gas-lemma", {"a": a, "b": b, "t": t, "dt": dt, "seed": seed}, measured, start, table)


# ---------------------------------------------------------------- Tweedie

def fd_grad_log_density(mix, sched, x, t, h=1e-5):
    x = np.asarray(x, dtype=float).reshape(-1, mix.dim)
    g = np.empty_like(x)
    for j in range(mix.dim):
        e = np.zeros(mix.dim)
        e[j] = h
        g[:, j] = (oracle.log_density(mix, sched, x + e, t) - oracle.log_density(mix, sched, x - e, t)) / (2 * h)
    return g


def check_tweedie(mix=None, sigma_q=1.0, n_probes=100, seed=0, table=None):
    """Finite-difference ``grad log p_t`` vs ``(E[x_0|x_t] - x_t) / (t sigma_q^2)``."""
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = mix or _two_atom()
    sched = Schedule("ve", sigma_q=sigma_q)
    rng = RngStream(seed)
    worst = 0.0
    for _ in range(n_probes):
        t = 0.05 + 0.95 * rng.uniform()
        x = 2.0 * rng.normal((1, mix.dim))
        fd = fd_grad_log_density(mix, sched, x, t)
        tw = (oracle.denoise_x0(mix, sched, x, t) - x) / (t * sigma_q**2)
        worst = max(worst, float(np.abs(fd - tw).max()))
    return _report("tweedie", {"atoms": mix.atoms, "sigma_q": sigma_q, "seed": seed},
                   {"max_abs_error": worst}, start, table)


# ------------------------------------------------------ one-step transport

def check_transport(mix=None, sigma_q=1.0, dts=(1 / 4, 1 / 64, 1 / 256), n=10_000, seed=0, table=None):
    """Push draws of ``p_1`` through one DDIM step and compare with ``p_{1-dt}``.

    The ``p_1`` draws are stratified (inverse CDF at randomly shifted midpoints)
    so the statistic measures the transport error rather than sampling noise.
    A plain Monte Carlo run and a DDPM step are reported alongside.
    """
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = mix or _two_atom()
    sched = Schedule("ve", sigma_q=sigma_q)
    rng = RngStream(seed)
    den = ExactDenoiser(mix, sched)
    u = (np.arange(n) + rng.uniform()) / n
    x_strat = oracle.quantile_1d(mix, sched, u, 1.0)[:, None]
    x_mc = oracle.sample_marginal(mix, sched, 1.0, n, rng)
    ks_ddim, ks_mc, ks_ddpm = [], [], []
    for dt in dts:
        cdf = lambda y, dt=dt: oracle.cdf_1d(mix, sched, y, 1.0 - dt)  # noqa: E731
        ks_ddim.append(ks_vs_cdf(ddim_step(x_strat, 1.0, dt, den, sched), cdf))
        ks_mc.append(ks_vs_cdf(ddim_step(x_mc, 1.0, dt, den, sched), cdf))
        ks_ddpm.append(ks_vs_cdf(ddpm_step(x_mc, 1.0, dt, den, sched, rng), cdf))
    measured = {"ks_final": ks_ddim[-1], "strictly_decreasing": _strictly_decreasing(ks_ddim)}
    details = {"dts": dts, "ks_ddim": ks_ddim, "ks_ddim_mc": ks_mc, "ks_ddpm_mc": ks_ddpm}
    return _report("transport", {"atoms": mix.atoms, "dts": dts, "n": n, "seed": seed},
                   measured, start, table, details)


# ---------------------------------------------------------- DDPM endpoints

def check_ddpm_endpoints(mix=None, sigma_q=1.0, T=1000, n=10_000, seed=0, table=None):
    """Full DDPM run on a two-atom target: atom frequencies and residual noise."""
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = mix or _two_atom()
    sched = Schedule("ve", sigma_q=sigma_q, steps=T)
    cfg = SamplerConfig("ddpm", sched, ExactDenoiser(mix, sched), n=n, keep=[])
    ends = ddpm_sample(cfg, RngStream(seed)).endpoints
    idx = mix.nearest_index(ends)
    freq = np.bincount(idx, minlength=len(mix)) / n
    mean_dist = float(mix.nearest_distance(ends).mean())
    bound = 3.0 * sigma_q * math.sqrt(1.0 / T)
    measured = {"freq_min": float(freq.min()), "freq_max": float(freq.max()),
                "mean_distance": mean_dist, "distance_margin": bound - mean_dist}
    return _report("ddpm-endpoints", {"atoms": mix.atoms, "T": T, "n": n, "seed": seed},
                   measured, start, table, {"frequencies": freq, "distance_bound": bound})


# ------------------------------------------------- SDE/ODE marginals

def check_marginal_equivalence(mix=None, sigma_q=1.0, T=2000, n=10_000, times=(0.75, 0.5, 0.25, 0.01),
                               seed=0, table=None):
    """Two-sample KS between DDPM and DDIM states started from independent exact draws of ``p_1``."""
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = mix or _two_atom()
    sched = Schedule("ve", sigma_q=sigma_q, steps=T)
    den = ExactDenoiser(mix, sched)
    r_sde, r_ode = RngStream(seed).spawn(2)
    x1_sde = oracle.sample_marginal(mix, sched, 1.0, n, r_sde)
    x1_ode = oracle.sample_marginal(mix, sched, 1.0, n, r_ode)
    keep = list(times)
    tr_sde = ddpm_sample(SamplerConfig("ddpm", sched, den, n=n, keep=keep), r_sde, x1=x1_sde)
    tr_ode = ddim_sample(SamplerConfig("ddim", sched, den, n=n, keep=keep), None, x1=x1_ode)
    ks = {t: float(ks_2samp(tr_sde.at(t)[:, 0], tr_ode.at(t)[:, 0]).statistic) for t in times}
    ks_t1 = float(ks_2samp(x1_sde[:, 0], x1_ode[:, 0]).statistic)
    ks_oracle = {t: ks_vs_cdf(tr_ode.at(t), lambda y, t=t: oracle.cdf_1d(mix, sched, y, t)) for t in times}
    measured = {"ks_max": max(ks.values()), "ks_t1": ks_t1}
    details = {"ks": {str(k): v for k, v in ks.items()}, "ks_ddim_vs_cdf": {str(k): v for k, v in ks_oracle.items()}}
    return _report("marginal-equivalence", {"atoms": mix.atoms, "T": T, "n": n, "seed": seed},
                   measured, start, table, details)


# --------------------------------------------------- convergence orders

def _pf_endpoint(mix, sched, x1, T, stop, method):
    den = ExactDenoiser(mix, sched)
    x = np.atleast_2d(np.asarray(x1, dtype=float))
    grid = time_grid(T, stop)
    for t in grid[:-1]:
        x = ode_step(x, t, 1.0 / T, den, sched, method)
    return x


def observed_order(steps, errors) -> float:
    """Least-squares ``p`` in ``error ~ C T^{-p}``."""
    return -_fit_slope(np.asarray(steps, float), np.asarray(errors, float))


def check_convergence_orders(sigma_q=1.0, x1=1.3, delta_steps=(200, 400, 800, 1600, 3200), delta_stop=0.01,
                             mix_steps=(256, 512, 1024, 2048), mix_stop=1 / 16, ref_steps=2**16, table=None):
    """Euler/Heun on the VE probability-flow ODE.

    delta target: exact solution ``x_t = x_1 sqrt(t)``; two-atom target:
    Heun reference at ``T = 2^16``; zero field (start on the atom): error 0.
    """
    table = table or load_thresholds()
    start = time.perf_counter()
    sched = Schedule("ve", sigma_q=sigma_q)
    delta = DiracMixture(np.zeros((1, 1)), np.ones(1))
    exact = x1 * math.sqrt(delta_stop)
    err = {m: [abs(float(_pf_endpoint(delta, sched, x1, T, delta_stop, m)[0, 0]) - exact) for T in delta_steps]
           for m in ("euler", "heun")}
    mix = _two_atom()
    ref = float(_pf_endpoint(mix, sched, 0.4, ref_steps, mix_stop, "heun")[0, 0])
    err_mix = {m: [abs(float(_pf_endpoint(mix, sched, 0.4, T, mix_stop, m)[0, 0]) - ref) for T in mix_steps]
               for m in ("euler", "heun")}
    zero = max(abs(float(_pf_endpoint(delta, sched, 0.0, T, delta_stop, m)[0, 0])) for m in ("euler", "heun")
               for T in delta_steps[:2])
    measured = {
        "euler_order": observed_order(delta_steps, err["euler"]),
        "heun_order": observed_order(delta_steps, err["heun"]),
        "euler_order_mix": observed_order(mix_steps, err_mix["euler"]),
        "heun_order_mix": observed_order(mix_steps, err_mix["heun"]),
        "zero_field_error": zero,
    }
    details = {"delta_steps": delta_steps, "delta_errors": err, "mix_steps": mix_steps, "mix_errors": err_mix}
    inputs = {"sigma_q": sigma_q, "x1": x1, "delta_steps": delta_steps, "mix_steps": mix_steps}
    return _report("convergence-orders", inputs, measured, start, table, details)


# ---------------------------------------------- DDIM vs linear flows

def check_ddim_linear_equiv(a=-1.0, b=1.0, sigma_q=2.0, x_star=0.7, steps=(512, 2048, 8192), table=None):
    """Max gap between DDIM ``y_t`` and the linear marginal flow at ``sqrt(t)``."""
    table = table or load_thresholds()
    start = time.perf_counter()
    mix = _two_atom(a, b)
    gaps = [ddim_vs_linear_reparam(mix, x_star, T, sigma_q).max_gap for T in steps]
    single = DiracMixture(np.array([[a]]), np.ones(1))
    gap_single = ddim_vs_linear_reparam(single, x_star, steps[-1], sigma_q).max_gap
    shift = 3.7
    gap_shifted = ddim_vs_linear_reparam(mix.translated(shift), x_star + shift, steps[0], sigma_q).max_gap
    measured = {"gap_final": gaps[-1], "strictly_decreasing": _strictly_decreasing(gaps),
                "gap_single_atom": gap_single, "translation_delta": abs(gap_shifted - gaps[0])}
    inputs = {"a": a, "b": b, "sigma_q": sigma_q, "x_star": x_star, "steps": steps}
    return _report("ddim-linear", inputs, measured, start, table, {"gaps": gaps})


# ------------------------------------------------------ flow combining

def check_flow_combining(sigma_q=1.0, n_probes=100, seed=0, table=None):
    """Marginal velocity vs the explicit posterior-weighted sum of per-atom velocities."""
    table = table or load_thresholds()
    start = time.perf_counter()
    rng = RngStream(seed)
    mix = DiracMixture(np.array([[-1.0, 0.5], [1.2, -0.3]]), np.array([0.3, 0.7]))
    worst = 0.0
    combos = [(LinearFlow(), Coupling("independent", mix, sigma_q=sigma_q)),
              (LinearFlow(), Coupling("diffusion", mix, sigma_q=sigma_q)),
              (SqrtFlow(), Coupling("diffusion", mix, sigma_q=sigma_q))]
    for flow, coupling in combos:
        spec = FlowSpec(flow, coupling)
        for _ in range(n_probes // len(combos) + 1):
            t = 0.02 + 0.96 * rng.uniform()
            x = 1.5 * rng.normal((1, 2))
            v = marginal_velocity(spec, x, t)
            r, per = per_atom_velocities(spec, x, t)
            w = np.einsum("nk,nkd->nd", r, per)
            worst = max(worst, float(np.abs(v - w).max() / max(1.0, np.abs(v).max())))
    return _report("flow-combining", {"seed": seed, "n": n_probes}, {"max_error": worst}, start, table)


# ------------------------------------------------------------ gradients

def gradient_check(model: Mlp, x, t, y, h=1e-5, floor=1e-6):
    """Largest per-parameter relative error between backprop and central differences."""
    _, gw, gb = model.loss_and_grad(x, t, y)
    analytic = Mlp.flatten_grads(gw, gb)
    base = model.get_flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        p = base.copy()
        p[i] += h
        model.set_flat(p)
        lp = model.loss_and_grad(x, t, y)[0]
        p[i] -= 2 * h
        model.set_flat(p)
        lm = model.loss_and_grad(x, t, y)[0]
        numeric[i] = (lp - lm) / (2 * h)
    model.set_flat(base)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(rel.max())


def check_gradients(n_nets=20, seed=0, table=None):
    """Backprop vs finite differences on random small nets (depth <= 3, width <= 32)."""
    table = table or load_thresholds()
    start = time.perf_counter()
    rng = RngStream(seed)
    worst = 0.0
    for k in range(n_nets):
        d = 1 + int(rng.uniform() * 2)
        depth = 1 + int(rng.uniform() * 3)
        width = 4 + int(rng.uniform() * 29)
        if k == 0:
            depth, width = 3, 32
        model = Mlp([d + 1] + [width] * depth + [d], seed=int(rng.uniform() * 2**31))
        for w in model.biases:
            w += 0.1 * rng.normal(w.shape)
        n = 8
        x = rng.normal((n, d))
        t = rng.uniform(n)
        y = rng.normal((n, d))
        worst = max(worst, gradient_check(model, x, t, y))
    return _report("gradients", {"n_nets": n_nets, "seed": seed}, {"max_rel_error": worst}, start, table)


# --------------------------------------------------- parametrisations

def check_parametrization(n=1000, seed=0, table=None):
    """``sigma_t^2 * ||eps_hat - eps||^2 == ||x0_hat - x0||^2`` for a frozen random network
    (with ``x0_hat`` derived from ``eps_hat``), and the analogous v-prediction identity."""
    table = table or load_thresholds()
    start = time.perf_counter()
    rng = RngStream(seed)
    mix = make_dataset("spiral", 16, seed=seed)
    worst = 0.0
    for kind in ("ve", "vp", "karras"):
        sched = Schedule(kind, sigma_q=1.5 if kind == "ve" else 1.0)
        net = Mlp.for_dim(2, hidden=(16, 16), seed=int(rng.uniform() * 2**31))
        x0 = mix.sample(n, rng)
        t = 0.01 + 0.99 * rng.uniform(n)
        eps = rng.normal(x0.shape)
        s = sched.s(t)[:, None]
        sig = sched.sigma(t)[:, None]
        xt = s * x0 + s * sig * eps
        pred = net(xt, t)
        eps_loss = ((pred - eps) ** 2).sum(1)
        x0_hat = x0_from_prediction("eps", pred, xt, t, sched)
        x0_loss = ((x0_hat - x0) ** 2).sum(1)
        gap = np.abs(sig[:, 0] ** 2 * eps_loss - x0_loss) / np.maximum(x0_loss, 1.0)
        # v-prediction: x0 error = sigma/(s + sigma^2) * v error
        v_target = s * eps - sig * x0
        v_loss = ((pred - v_target) ** 2).sum(1)
        x0_hat_v = x0_from_prediction("v", pred, xt, t, sched)
        x0_loss_v = ((x0_hat_v - x0) ** 2).sum(1)
        coef = (sig / (s + sig**2))[:, 0] ** 2
        gap_v = np.abs(coef * v_loss - x0_loss_v) / np.maximum(x0_loss_v, 1.0)
        worst = max(worst, float(gap.max()), float(gap_v.max()))
    return _report("parametrization", {"n": n, "seed": seed}, {"max_gap": worst}, start, table)


# ------------------------------------------------------------- spiral

LR_STAGES = ((0.6, 1e-3), (0.2, 3e-4), (0.1, 1e-4), (0.1, 3e-5))


def train_staged(model, spec, data, batches, seed, stages=LR_STAGES, batch_size=128):
    """Adam with a piecewise-constant learning rate; one continuous loss curve."""
    opt, start, curve = None, 0, []
    for k, (frac, lr) in enumerate(stages):
        n = batches - start if k == len(stages) - 1 else int(round(batches * frac))
        res = train(model, spec, data, lr=lr, batches=n, batch_size=batch_size, seed=seed + 7919 * k,
                    optimizer=opt, start_batch=start)
        opt, start = res.optimizer, start + n
        curve += res.curve
    return curve


def _loss_decreased(curve) -> float:
    losses = np.array([c["loss"] for c in curve])
    k = max(1, len(losses) // 10)
    return float(np.median(losses[-k:]) < np.median(losses[:k]))


def check_spiral(seed=0, batches_memorize=24000, batches_generalize=12000, n_samples=1024,
                 sigma_q_memorize=0.5, sigma_q_generalize=1.0, steps=1024, table=None):
    """Train the 3x128 ReLU network on spiral atoms.

    N=10 (x0-prediction, DDIM sampling): fraction of endpoints within 0.05 of
    a train atom. N=40 (linear flow matching): mean endpoint distance to the
    spiral curve. The analytic-oracle sampler's own curve distance at the same
    T is reported as the reference.
    """
    table = table or load_thresholds()
    start = time.perf_counter()

    sched = Schedule("ve", sigma_q=sigma_q_memorize, steps=steps)
    small = make_dataset("spiral", 10, seed=seed)
    spec_x0 = LossSpec("x0", sched)
    net = Mlp.for_dim(2, seed=seed + 1)
    curve_mem = train_staged(net, spec_x0, small, batches_memorize, seed + 2)
    cfg = SamplerConfig("ddim", sched, LearnedDenoiser(net, spec_x0), n=n_samples, keep=[])
    ends = ddim_sample(cfg, RngStream(seed + 3)).endpoints
    memorized = float((small.nearest_distance(ends) <= 0.05).mean())

    sched = Schedule("ve", sigma_q=sigma_q_generalize, steps=steps)
    big = make_dataset("spiral", 40, seed=seed)
    spec_fm = LossSpec("flow-linear", sched)
    net2 = Mlp.for_dim(2, seed=seed + 4)
    res_gen = train(net2, spec_fm, big, batches=batches_generalize, seed=seed + 5)
    coupling = Coupling("independent", big, sigma_q=sigma_q_generalize)
    fspec = FlowSpec(LinearFlow(), coupling, LearnedVelocity(net2))
    ends2 = flow_sample(fspec, steps, RngStream(seed + 6), n=n_samples, keep_all=False).endpoints
    curve_dist = float(spiral_distance(ends2).mean())
    ends_or = flow_sample(FlowSpec(LinearFlow(), coupling), steps, RngStream(seed + 6), n=n_samples,
                          keep_all=False).endpoints
    oracle_dist = float(spiral_distance(ends_or).mean())

    measured = {"memorized_fraction": memorized, "curve_distance": curve_dist,
                "oracle_curve_distance": oracle_dist,
                "loss_decreased": min(_loss_decreased(curve_mem), _loss_decreased(res_gen.curve))}
    inputs = {"seed": seed, "batches": [batches_memorize, batches_generalize], "steps": steps,
              "sigma_q": [sigma_q_memorize, sigma_q_generalize], "lr_stages": LR_STAGES}
    return _report("spiral", inputs, measured, start, table)


CHECKS = {
    "ddim-scaling": check_ddim_scaling,
    "var-reduction": check_var_reduction,
    "kl-lemma": check_kl_scaling,
    "transport": check_transport,
    "ddpm-endpoints": check_ddpm_endpoints,
    "marginal-equivalence": check_marginal_equivalence,
    "convergence-orders": check_convergence_orders,
    "ddim-linear": check_ddim_linear_equiv,
    "flow-combining": check_flow_combining,
    "gradients": check_gradients,
    "spiral": check_spiral,
    "parametrization": check_parametrization,
    "gas-lemma": check_gas_lemma,
    "tweedie": check_tweedie,
}


def run_checks(names, table=None) -> list:
    table = table or load_thresholds()
    return [CHECKS[name](table=table) for name in names]


def format_table(reports) -> str:
    rows = [("check", "status", "runtime", "measured")]
    for r in reports:
        shown = ", ".join(f"{k}={v:.4g}" for k, v in r.measured.items() if k != "runtime_s")
        rows.append((r.name, "PASS" if r.passed else "FAIL", f"{r.runtime_s:.2f}s", shown))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    return "\n".join(f"{a:<{widths[0]}}  {b:<{widths[1]}}  {c:>{widths[2]}}  {d}" for a, b, c, d in rows)
