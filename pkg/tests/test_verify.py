import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest, norm

from difflab import verify
from difflab.errors import NumericalError
from difflab.verify import GaussianMixture1D, adaptive_simpson, kl_gaussian_vs_posterior


def test_evaluate_is_pure():
    rules = [{"measure": "a", "op": "<=", "value": 1.0}, {"measure": "b", "op": ">", "value": 0.0}]
    assert verify.evaluate({"a": 1.0, "b": 0.5}, rules)
    assert not verify.evaluate({"a": 1.1, "b": 0.5}, rules)
    assert not verify.evaluate({"a": 0.5}, rules)


def test_thresholds_cover_every_check():
    table = verify.load_thresholds()
    assert set(table) == set(verify.CHECKS)
    for rules in table.values():
        assert all(r["op"] in ("<", "<=", ">", ">=", "==") for r in rules)


def test_report_roundtrip():
    r = verify.check_flow_combining(n_probes=10)
    d = json.loads(r.to_json())
    assert d["name"] == "flow-combining" and d["passed"] is True
    assert d["passed"] == verify.evaluate(d["measured"], d["thresholds"])
    assert r.failures() == []
    assert verify.check_flow_combining(n_probes=10).inputs_digest == r.inputs_digest


def test_custom_threshold_table_flips_verdict():
    table = {"gas-lemma": [{"measure": "max_rel_error", "op": "<", "value": -1.0}]}
    r = verify.check_gas_lemma(table=table)
    assert not r.passed and r.failures() == table["gas-lemma"]


def test_adaptive_simpson():
    assert adaptive_simpson(math.sin, 0.0, math.pi) == pytest.approx(2.0, abs=1e-11)
    # narrow peak inside a wide interval
    val = adaptive_simpson(lambda x: math.exp(-x * x / 2e-4), -5.0, 5.0)
    assert val == pytest.approx(math.sqrt(2 * math.pi * 1e-4), rel=1e-9)
    with pytest.raises(NumericalError):
        adaptive_simpson(lambda x: 1.0 if x > 0.123456789 else 0.0, 0.0, 1.0, max_depth=3)


@settings(max_examples=20, deadline=None)
@given(m=st.floats(-2, 2), v=st.floats(0.3, 3.0), z=st.floats(-2, 2), sigma=st.floats(0.05, 0.5))
def test_kl_gaussian_target_closed_form(m, v, z, sigma):
    # target N(m, v): posterior N((v z + s2 m)/(v + s2), v s2/(v + s2)); q = N(z - s2 (z - m)/v, s2)
    s2 = sigma**2
    target = GaussianMixture1D((m,), (math.sqrt(v),), (1.0,))
    mu_q = z - s2 * (z - m) / v
    mu_p, var_p = (v * z + s2 * m) / (v + s2), v * s2 / (v + s2)
    want = 0.5 * (math.log(var_p / s2) + (s2 + (mu_q - mu_p) ** 2) / var_p - 1.0)
    got = kl_gaussian_vs_posterior(target, z, sigma)
    assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_gaussian_mixture_score():
    gm = GaussianMixture1D((-1.0, 1.0), (1.0, 0.5), (0.3, 0.7))
    x, h = 0.4, 1e-6
    fd = (gm.logpdf(x + h) - gm.logpdf(x - h)) / (2 * h)
    assert gm.dlogpdf(x) == pytest.approx(fd, rel=1e-7)
    assert gm.logpdf(0.0) == pytest.approx(math.log(0.3 * norm.pdf(1.0) + 0.7 * norm.pdf(0, 1, 0.5)))


def test_ks_vs_cdf_matches_scipy():
    x = np.random.default_rng(0).normal(size=500)
    assert verify.ks_vs_cdf(x, norm.cdf) == pytest.approx(kstest(x, norm.cdf).statistic, abs=1e-15)


def test_observed_order():
    steps = [100, 200, 400]
    assert verify.observed_order(steps, [3.0 / T**2 for T in steps]) == pytest.approx(2.0)


@pytest.mark.parametrize("name", ["ddim-scaling", "gas-lemma", "tweedie", "flow-combining", "parametrization",
                                  "transport", "kl-lemma"])
def test_fast_checks_pass(name):
    r = verify.CHECKS[name]()
    assert r.passed, r.failures()


def test_kl_slopes_reported():
    r = verify.check_kl_scaling()
    assert 3.5 <= r.measured["slope"] <= 4.5
    assert r.measured["ablated_slope"] <= 2.5
    assert len(r.details["kl"]) == 3


def test_format_table():
    text = verify.format_table([verify.check_gas_lemma()])
    assert "gas-lemma" in text and "PASS" in text
