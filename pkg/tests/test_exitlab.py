import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowfast.errors import InsufficientData, OutsideDomain
from slowfast.exitlab import ExitCurve, exit_probability, first_exit, fit_exponent, layer_value, \
    quadratic_form, reentry_fraction, wilson_interval
from slowfast.lyap import MetricField
from slowfast.model import get_system
from slowfast.sde import PathRecord


@pytest.fixture(scope="module")
def lin():
    entry = get_system("linear1d")
    return entry, MetricField(entry.system, entry.params)


def _record(x, y, dt=0.01):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    R = x.shape[1]
    return PathRecord(np.arange(R) * dt, x[..., None], y[..., None], "full", np.arange(len(x)),
                      np.full(len(x), -1))


def test_layer_value_centre_and_offset(lin):
    entry, mf = lin
    xb, _, _ = mf.evaluate(np.array([[0.4]]))
    assert layer_value(mf, xb, [[0.4]])[0][0] == pytest.approx(0.0, abs=1e-28)
    # X̄ = 1/2 on linear1d, so the form at x = delta is 2 delta^2
    assert layer_value(mf, [[0.1]], [[0.0]])[0][0] == pytest.approx(0.02)
    with pytest.raises(OutsideDomain):
        layer_value(mf, [[0.0]], [[9.0]])


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1), st.floats(0.1, 5.0))
def test_quadratic_form_homogeneous(a, b, c, scale):
    X = np.array([[2.0, 0.3], [0.3, 1.0]])
    dx = np.array([a, b]) * c
    assert quadratic_form(scale * dx, X) == pytest.approx(scale**2 * quadratic_form(dx, X), rel=1e-10, abs=1e-14)


def test_first_exit_on_manifold_never(lin):
    _, mf = lin
    y = np.exp(-np.arange(50) * 0.01)[None]
    tB, tD = first_exit(_record(y * 1.01, y), mf, 0.1)
    assert np.isinf(tB[0]) and np.isinf(tD[0])


def test_first_exit_immediate(lin):
    _, mf = lin
    h = 0.05
    x0 = 1.5 * h * np.sqrt(0.5)  # quadratic form (1.5 h)^2
    tB, _ = first_exit(_record([[x0, 0.0, 0.0]], [[0.0, 0.0, 0.0]]), mf, h)
    assert tB[0] == 0.0


def test_first_exit_synthetic_index(lin):
    _, mf = lin
    # q = 2 x^2 at y = 0; level h^2 = 0.02 is crossed first at index 4
    x = [[0.0, 0.05, -0.08, 0.09, -0.11, 0.0, 0.2]]
    tB, tD = first_exit(_record(x, np.zeros((1, 7))), mf, np.sqrt(0.02))
    assert tB[0] == pytest.approx(0.04)
    assert np.isinf(tD[0])


def test_first_exit_domain_first(lin):
    _, mf = lin
    tB, tD = first_exit(_record([[4.04, 0.0, 3.0]], [[4.0, 6.0, 0.0]]), mf, 0.1)
    assert tD[0] == pytest.approx(0.01) and np.isinf(tB[0])


@settings(max_examples=60)
@given(st.integers(1, 500), st.data())
def test_wilson_interval_contains_estimate(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


def _synthetic(p, hs, sigma):
    p = np.asarray(p)
    return ExitCurve(hs * sigma, 1.0, 10**9, np.zeros(len(hs), int), p, p, p, sigma, 0.01)


@pytest.mark.parametrize("pref", [1.0, 3.0])
def test_fit_exact_log_linear(pref):
    sigma = 0.03
    hs = np.array([2.0, 2.5, 3.0, 3.5, 4.0])
    fit = fit_exponent(_synthetic(pref * np.exp(-0.5 * hs**2), hs, sigma))
    assert fit.kappa_hat == pytest.approx(0.5, abs=1e-6)
    assert fit.prefactor == pytest.approx(pref, rel=1e-6)


def test_fit_needs_four_levels():
    hs = np.array([2.0, 3.0, 6.0, 8.0])
    with pytest.raises(InsufficientData):
        fit_exponent(_synthetic(np.exp(-0.5 * hs**2), hs, 0.03))


def test_noise_free_never_exits(lin):
    entry, _ = lin
    curve = exit_probability(entry.system, entry.params.replace(sigma=0.0), np.array([1e-3, 1e-2]), 1.0, 20,
                             seed=0, y0=entry.y0)
    assert np.all(curve.p_hat == 0.0)


@pytest.fixture(scope="module")
def linear1d_curve():
    entry = get_system("linear1d")
    params = entry.params.replace(eps=0.01, sigma=0.03)
    return exit_probability(entry.system, params, np.array([4.0, 6.0, 8.0]) * params.sigma, 1.0, 10_000,
                            seed=11, y0=entry.y0)


def test_exit_probability_nested(linear1d_curve):
    assert linear1d_curve.p_hat[0] >= linear1d_curve.p_hat[2]
    assert np.all(np.diff(linear1d_curve.p_hat) <= 0)


def test_exit_probability_six_sigma_regression(linear1d_curve):
    # frozen Monte Carlo fixture (seed 11, N = 10^4, dt = eps/20)
    assert linear1d_curve.n_exit.tolist() == [607, 0, 0]
    assert linear1d_curve.ci_high[1] - linear1d_curve.ci_low[1] <= 0.05


def test_exit_probability_six_sigma_strictly_inside(linear1d_curve):
    # stated expectation p_hat(6 sigma) in (0, 1); at this N the estimate is 0 (see decisions ledger)
    assert 0.0 < linear1d_curve.p_hat[1] < 1.0


def test_reentry_small(lin):
    entry, _ = lin
    params = entry.params.replace(sigma=0.01)
    frac, x0, t = reentry_fraction(entry.system, params, entry.y0, 0.04, 0.06, 0.3, 100, seed=2)
    assert frac == 1.0 and t >= 0.3
