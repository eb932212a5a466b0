import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import expm_taylor, rk4_scalar, scalar_covariance_quadrature
from slowfast.errors import StiffnessFailure
from slowfast.flow import MatrixTrack, OrbitTable, chi_functions, coupling_block, covariance_evolution, default_step, \
    integrate_reduced, principal_solution, propagator_norm_series
from slowfast.lyap import MetricField
from slowfast.model import Box, NoiseParams, SlowFastSystem, get_system


def _orbit(A, B, C, eps, t_end=1.0, n=2001, F0=None, G0=None, rho=0.0):
    times = np.linspace(0.0, t_end, n)
    return OrbitTable.constant(times, eps, np.atleast_2d(A), np.atleast_2d(B), np.atleast_2d(C),
                               None if F0 is None else np.atleast_2d(F0), None if G0 is None else np.atleast_2d(G0),
                               rho)


def test_default_step_divides_horizon():
    h = default_step(0.01, 1.0)
    assert h <= 0.01 / 20 and round(1.0 / h) * h == pytest.approx(1.0)


def test_linear1d_orbit():
    entry = get_system("linear1d")
    orbit = integrate_reduced(entry.system, entry.params, entry.y0, 1.0)
    assert np.max(np.abs(orbit.y_det[:, 0] - np.exp(-orbit.times))) < 1e-9
    assert np.all(orbit.A == -1.0)


def test_pitchfork_slow_time_is_clock():
    entry = get_system("pitchfork")
    orbit = integrate_reduced(entry.system, entry.params, [-0.5], 0.4)
    assert np.allclose(orbit.y_det[:, 0], -0.5 + orbit.times, atol=1e-12)


def test_cubic_decay_orbit():
    sys_ = SlowFastSystem(n=1, m=1, k=1, f=lambda x, y, e: -x + 0.0 * y, g=lambda x, y, e: -y**3 + 0.0 * x,
                          F=lambda x, y, e: np.ones(np.shape(x)[:-1] + (1, 1)),
                          G=lambda x, y, e: np.ones(np.shape(x)[:-1] + (1, 1)), box=Box([-3.0], [3.0]))
    orbit = integrate_reduced(sys_, NoiseParams(eps=0.01, sigma=0.0), [1.0], 1.0)
    assert orbit.y_det[-1, 0] == pytest.approx(1.0 / np.sqrt(3.0), abs=1e-9)
    assert orbit.y_det[-1, 0] == pytest.approx(rk4_scalar(lambda y: -y**3, 1.0, 1.0), abs=1e-9)


def test_fast_propagator_over_eps():
    eps = 0.01
    orbit = _orbit(-1.0, 0.0, 0.0, eps)
    k = orbit.index(eps)
    U = principal_solution(orbit.fast_track(), 0.0, orbit.times[k])
    assert U[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-10)


def test_slow_propagator_matches_expm_oracle():
    B = np.array([[-0.3, 1.2], [-0.8, 0.1]])
    times = np.linspace(0.0, 1.0, 401)
    orbit = OrbitTable.constant(times, 0.01, -np.eye(1), B, np.zeros((2, 1)))
    V = principal_solution(orbit.slow_track(), 0.25, 1.0)
    assert np.allclose(V, expm_taylor(0.75 * B), atol=1e-8)
    assert np.array_equal(principal_solution(orbit.slow_track(), 0.5, 0.5), np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200))
def test_cocycle(i, j, k):
    r, s, t = sorted((i, j, k))
    times = np.linspace(0.0, 1.0, 201)

    def coeff(t):
        return np.stack([np.array([[-1.0 + 0.5 * np.sin(3 * v), 0.3], [-0.2, -2.0]]) for v in t])

    tr = MatrixTrack(times, coeff(times), coeff(0.5 * (times[1:] + times[:-1])), 10.0)
    Uts = principal_solution(tr, times[s], times[t])
    Usr = principal_solution(tr, times[r], times[s])
    assert np.allclose(Uts @ Usr, principal_solution(tr, times[r], times[t]), rtol=1e-12, atol=1e-14)


def test_coupling_block():
    eps = 0.01
    assert np.all(coupling_block(_orbit(-1.0, 0.0, 0.0, eps), 0.0, 1.0) == 0.0)
    orbit = _orbit(-1.0, 0.0, 1.0, eps)
    for t in (0.05, 1.0):
        S = coupling_block(orbit, 0.0, t)
        assert S[0, 0] == pytest.approx(eps * (1.0 - np.exp(-t / eps)), rel=1e-6)
    assert coupling_block(orbit, 0.4, 0.4)[0, 0] == 0.0


def test_chi_identity_flow():
    chi = chi_functions(_orbit(-1.0, 0.0, 0.0, 0.01))
    assert np.allclose(chi.chi1, chi.times, atol=1e-12)
    assert np.allclose(chi.chi2, chi.times, atol=1e-12)


def test_chi_contraction_uses_inner_supremum():
    # sup over v in [u, s] of e^{-(s - v)} is attained at v = s, so the integrand is 1
    chi = chi_functions(_orbit(-1.0, -1.0, 0.0, 0.01))
    assert np.allclose(chi.chi1, chi.times, atol=1e-10)
    assert np.allclose(chi.chi2, chi.times, atol=1e-10)


def test_chi_expansion():
    chi = chi_functions(_orbit(-1.0, 1.0, 0.0, 0.01))
    t = chi.times
    assert np.allclose(chi.chi1, np.exp(t) - 1.0, rtol=2e-3, atol=1e-6)
    assert np.allclose(chi.chi2, (np.exp(2 * t) - 1.0) / 2.0, rtol=2e-3, atol=1e-6)
    assert np.all(chi.err2 >= 0)


def test_norm_series():
    orbit = _orbit(-1.0, 0.0, 0.0, 0.1, n=101)
    nU = propagator_norm_series(orbit.fast_track())
    assert np.allclose(nU, np.exp(-orbit.times / 0.1), rtol=1e-10)


def test_covariance_linear1d_stationary():
    entry = get_system("linear1d")
    orbit = integrate_reduced(entry.system, entry.params, entry.y0, 1.0)
    cov = covariance_evolution(orbit, entry.params, np.array([[0.5]]), np.zeros((1, 1)), np.zeros((1, 1)))
    assert np.allclose(cov.X, 0.5, atol=1e-12)
    assert np.all(cov.Z == 0.0) and np.all(cov.Y == 0.0)


def test_covariance_unforced_decays():
    eps = 0.05
    orbit = _orbit(-1.0, -0.5, 0.0, eps, F0=0.0, G0=0.0, n=1001)
    p = NoiseParams(eps=eps, sigma=1.0)
    cov = covariance_evolution(orbit, p, np.array([[1.0]]), np.zeros((1, 1)), np.array([[2.0]]))
    assert np.allclose(cov.X[:, 0, 0], np.exp(-2.0 * orbit.times / eps), rtol=1e-6, atol=1e-14)
    assert np.allclose(cov.Y[:, 0, 0], 2.0 * np.exp(-orbit.times), rtol=1e-8)


@pytest.mark.parametrize("rho", [0.0, 0.5])
def test_covariance_matches_quadrature(rho):
    eps = 0.01
    orbit = _orbit(-1.0, 0.0, 1.0, eps, F0=1.0, G0=1.0, rho=rho, n=4001)
    cov = covariance_evolution(orbit, NoiseParams(eps=eps, sigma=1.0, rho=rho),
                               np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    X, Z, Y = scalar_covariance_quadrature(eps, 1.0, rho)
    assert cov.X[-1, 0, 0] == pytest.approx(X, rel=1e-5)
    assert cov.Z[-1, 0, 0] == pytest.approx(Z, rel=1e-5)
    assert cov.Y[-1, 0, 0] == pytest.approx(Y, rel=1e-5)


def test_covariance_tracks_metric_along_orbit():
    entry = get_system("cubic")
    params = entry.params.replace(eps=0.005)
    orbit = integrate_reduced(entry.system, params, [1.5], 1.0)
    mf = MetricField(entry.system, params)
    _, X0, _ = mf.evaluate(orbit.y_det[:1])
    cov = covariance_evolution(orbit, params, X0[0], np.zeros((1, 1)), np.zeros((1, 1)))
    _, Xt, _ = mf.evaluate(orbit.y_det)
    assert np.max(np.abs(cov.X[:, 0, 0] - Xt[:, 0, 0]) / Xt[:, 0, 0]) < 5 * params.eps


def test_covariance_refuses_coarse_grid():
    orbit = _orbit(-1.0, 0.0, 0.0, 0.01, n=11)
    with pytest.raises(StiffnessFailure):
        covariance_evolution(orbit, NoiseParams(eps=0.01, sigma=1.0), np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)))
