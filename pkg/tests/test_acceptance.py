"""Acceptance criteria, one test each, at the declared tolerances.

Each test prints a single PASS/FAIL line with the measured values (shown
under ``pytest -v``) and asserts the verdict computed from the thresholds
table.
"""

import pytest

from difflab import verify

CRITERIA = [
    (1, "ddim-scaling", "single-atom DDIM step equals the exact scaling"),
    (2, "var-reduction", "E[x_{t-dt}|x_t] identity: oracle residual and Monte Carlo slope"),
    (3, "kl-lemma", "Gaussian step approximation KL scales as sigma^4"),
    (4, "transport", "one DDIM step transports p_1 to p_{1-dt}"),
    (5, "ddpm-endpoints", "DDPM endpoint law on two atoms"),
    (6, "marginal-equivalence", "DDPM and DDIM share marginals"),
    (7, "convergence-orders", "Euler order 1, Heun order 2 on the PF-ODE"),
    (8, "ddim-linear", "DDIM equals the linear flow at sqrt(t)"),
    (9, "flow-combining", "marginal flow equals the weighted per-atom fields"),
    (10, "gradients", "backprop matches finite differences"),
    (11, "spiral", "spiral memorization (N=10) and generalization (N=40)"),
    (12, "parametrization", "eps/x0 losses agree after rescaling"),
]


def _line(number, report, description):
    shown = ", ".join(f"{k}={v:.4g}" for k, v in report.measured.items())
    status = "PASS" if report.passed else "FAIL"
    failed = "" if report.passed else f"  failed: {report.failures()}"
    return f"[{status}] criterion {number:2d} {report.name}: {description} | {shown}{failed}"


@pytest.mark.slow
@pytest.mark.parametrize("number,name,description", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(number, name, description, capsys):
    report = verify.CHECKS[name]()
    with capsys.disabled():
        print("\n" + _line(number, report, description))
    assert report.passed, report.failures()
