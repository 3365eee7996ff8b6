import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difflab.errors import ConfigError, DomainError, NumericalError
from difflab.schedule import Schedule, fg_to_s_sigma, simpson


def test_ve_values():
    sched = Schedule("ve", sigma_q=2.0)
    v = sched.eval(0.25)
    assert v == (1.0, 1.0, 0.0, 2.0)
    assert sched.terminal_std() == 2.0


def test_vp_closed_form():
    sched = Schedule("vp", beta_min=0.1, beta_max=20.0)
    t = 0.3
    alpha = 0.5 * 19.9 * t**2 + 0.1 * t
    assert math.isclose(sched.s(t), math.exp(-alpha / 2), rel_tol=1e-15)
    assert math.isclose(sched.sigma(t), math.sqrt(math.exp(alpha) - 1), rel_tol=1e-14)
    assert math.isclose(sched.f(t), -0.5 * (19.9 * t + 0.1))
    assert math.isclose(sched.g(t), math.sqrt(19.9 * t + 0.1))
    # s * sigma -> sqrt(1 - exp(-alpha)): unit variance at t = 1
    assert abs(sched.marginal_std(1.0) - 1.0) < 1e-4


def test_karras_values():
    sched = Schedule("karras", sigma_q=1.5)
    assert sched.sigma(0.4) == pytest.approx(0.6)
    assert sched.g(0.5) == pytest.approx(1.5)


@pytest.mark.parametrize("kind", ["ve", "vp", "karras"])
def test_quadrature_matches_closed_form(kind):
    sched = Schedule(kind, sigma_q=1.3)
    t = np.array([0.1, 0.5, 0.9, 1.0])
    s, sig = fg_to_s_sigma(sched.f, sched.g, t)
    assert np.allclose(s, sched.s(t), rtol=1e-10)
    assert np.allclose(sig, sched.sigma(t), rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.05, 0.95), kind=st.sampled_from(["ve", "vp", "karras"]),
       sigma_q=st.floats(0.3, 3.0))
def test_f_g_from_s_sigma(t, kind, sigma_q):
    sched = Schedule(kind, sigma_q=sigma_q)
    h = 1e-6
    ds = (sched.s(t + h) - sched.s(t - h)) / (2 * h)
    dsig = (sched.sigma(t + h) - sched.sigma(t - h)) / (2 * h)
    assert sched.f(t) == pytest.approx(ds / sched.s(t), rel=1e-6, abs=1e-8)
    g = sched.s(t) * math.sqrt(2 * dsig * sched.sigma(t))
    assert sched.g(t) == pytest.approx(g, rel=1e-6)


def test_custom_schedule_reproduces_vp():
    vp = Schedule("vp")
    custom = Schedule("custom", f_fn=vp.f, g_fn=vp.g)
    assert custom.s(0.7) == pytest.approx(vp.s(0.7), rel=1e-10)
    assert custom.sigma(0.7) == pytest.approx(vp.sigma(0.7), rel=1e-8)


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_custom_singular_integrand():
    sched = Schedule("custom", f_fn=lambda t: np.zeros_like(t), g_fn=lambda t: 1.0 / np.asarray(t))
    with pytest.raises(NumericalError):
        sched.sigma(0.5)


def test_simpson_exact_for_cubics():
    x = np.linspace(0.0, 2.0, 11)
    assert simpson(x**3 - x, 0.2) == pytest.approx(4.0 - 2.0, abs=1e-14)
    with pytest.raises(ValueError):
        simpson(np.ones(4), 1.0)


@pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
def test_time_domain(t):
    with pytest.raises(DomainError):
        Schedule("ve").sigma(t)


@pytest.mark.parametrize("kwargs", [{"kind": "cosine"}, {"sigma_q": 0.0}, {"steps": 0},
                                    {"kind": "vp", "beta_min": 2.0, "beta_max": 1.0}, {"kind": "custom"}])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        Schedule(**kwargs)


def test_with_steps_and_describe():
    sched = Schedule("vp", steps=100).with_steps(250)
    assert sched.dt == 1 / 250
    assert sched.describe() == {"kind": "vp", "sigma_q": 1.0, "steps": 250, "beta_min": 0.1, "beta_max": 20.0}


def test_constant_beta_vp():
    sched = Schedule("vp", beta_min=2.0, beta_max=2.0)
    assert sched.s(0.3) == pytest.approx(math.exp(-0.3))
    assert sched.sigma(0.3) == pytest.approx(math.sqrt(math.exp(0.6) - 1))
    assert sched.s(1e-12) == pytest.approx(1.0) and sched.sigma(1e-12) < 1e-5


def test_quadrature_worked_values():
    s, sig = fg_to_s_sigma(lambda t: 0.0 * t, lambda t: 1.7 + 0.0 * t, 1.0)
    assert s == 1.0 and sig == pytest.approx(1.7, rel=1e-12)
    vp = Schedule("vp", beta_min=0.1, beta_max=20.0)
    s, sig = fg_to_s_sigma(vp.f, vp.g, 0.5)
    assert s == pytest.approx(vp.s(0.5), rel=1e-6) and sig == pytest.approx(vp.sigma(0.5), rel=1e-6)
    _, sig = fg_to_s_sigma(lambda t: 0.0 * t, lambda t: np.sqrt(2 * t), 0.7)
    assert sig == pytest.approx(0.7, abs=1e-6)


def test_karras_at_zero():
    sched = Schedule("karras")
    assert sched.g(0.0) == 0.0 and sched.f(0.0) == 0.0
    assert sched.sigma(0.5) == 0.5 and sched.g(0.5) == 1.0
