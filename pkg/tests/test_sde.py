import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowfast.bif import split_at_bifurcation
from slowfast.flow import integrate_reduced, principal_solution
from slowfast.flow import chi_functions
from slowfast.manifold import adiabatic_batch
from slowfast.model import get_system
from slowfast.sde import NoiseBlock, NoiseStream, brownian_refine_increments, deterministic_path, \
    reduced_deviation, run_ensemble, simulate_full, simulate_linearized, simulate_reduced, worker_count


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.lists(st.integers(0, 10**6), min_size=1, max_size=5, unique=True),
       st.integers(1, 40), st.integers(1, 40))
def test_noise_independent_of_blocking_and_grouping(seed, idx, n1, n2):
    blk = NoiseBlock(seed, idx, 2, 0.01)
    split = np.concatenate([blk.draw(n1), blk.draw(n2)], axis=1)
    whole = NoiseBlock(seed, idx, 2, 0.01).draw(n1 + n2)
    assert np.array_equal(split, whole)
    for p, i in enumerate(idx):
        single = NoiseBlock.of(NoiseStream(seed, i), 2, 0.01).draw(n1 + n2)[0]
        assert np.array_equal(single, whole[p])
        assert np.array_equal(NoiseStream(seed, i).increments(n1 + n2, 2, 0.01), whole[p])


def test_streams_differ_by_seed_and_index():
    a = NoiseStream(1, 0).increments(50, 1, 1.0)
    assert not np.array_equal(a, NoiseStream(2, 0).increments(50, 1, 1.0))
    assert not np.array_equal(a, NoiseStream(1, 1).increments(50, 1, 1.0))


def test_refine_increments_sums():
    fine = NoiseBlock(3, [0, 1], 1, 0.25).draw(8)
    coarse = brownian_refine_increments(fine, 4)
    assert coarse.shape == (2, 2, 1)
    assert np.allclose(coarse[:, 0], fine[:, :4].sum(axis=1))


def test_noise_free_full_path_matches_orbit():
    entry = get_system("linear1d")
    params = entry.params
    x0 = adiabatic_batch(entry.system, entry.y0[None], params.eps)[0][0]
    rec = deterministic_path(entry.system, params, x0, entry.y0, 1.0)
    orbit = integrate_reduced(entry.system, params, entry.y0, 1.0)
    assert abs(rec.y[0, -1, 0] - orbit.y_det[-1, 0]) < 1e-3
    assert abs(rec.x[0, -1, 0] - orbit.xbar[-1, 0]) < 1e-3


def test_ou_stationary_variance():
    entry = get_system("linear1d")
    params = entry.params.replace(eps=0.01, sigma=0.05)
    x0 = adiabatic_batch(entry.system, entry.y0[None], params.eps)[0][0]
    rec = simulate_full(entry.system, params, x0, entry.y0, 1.0, NoiseBlock(1, np.arange(2000), 1, 5e-4),
                        record_stride=100)
    xbar = adiabatic_batch(entry.system, rec.y.reshape(-1, 1), params.eps)[0].reshape(rec.x.shape)
    xi = (rec.x - xbar)[:, rec.times >= 0.5, 0]
    ratio = np.mean(np.var(xi, axis=0)) / params.sigma**2
    assert 0.45 <= ratio <= 0.55


def test_full_runs_are_reproducible_and_subsettable():
    entry = get_system("coupled1d")
    args = (entry.system, entry.params, np.ones(1), entry.y0, 0.2)
    a = simulate_full(*args, NoiseBlock(9, np.arange(6), 1, 5e-4))
    b = simulate_full(*args, NoiseBlock(9, np.arange(6), 1, 5e-4))
    c = simulate_full(*args, NoiseBlock(9, [4], 1, 5e-4))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.array_equal(a.x[4], c.x[0])


def test_linearized_noise_free_is_principal_solution():
    entry = get_system("coupled1d")
    orbit = integrate_reduced(entry.system, entry.params, entry.y0, 0.5)
    xi0, eta0 = np.array([0.3]), np.array([-0.1])
    rec = simulate_linearized(orbit, entry.params.replace(sigma=0.0), xi0, eta0, NoiseStream(0, 0))
    W = principal_solution(orbit.joint_track(), 0.0, 0.5)
    assert np.allclose(np.concatenate([rec.x[0, -1], rec.y[0, -1]]), W @ np.concatenate([xi0, eta0]), atol=1e-6)


def test_linearized_slow_block_unforced():
    entry = get_system("linear1d")
    orbit = integrate_reduced(entry.system, entry.params, entry.y0, 0.5)
    rec = simulate_linearized(orbit, entry.params, np.zeros(1), np.zeros(1), NoiseBlock(2, np.arange(5), 1,
                                                                                          orbit.step))
    assert np.all(rec.y == 0.0) and np.any(rec.x != 0.0)


def test_reduced_pitchfork_update():
    entry = get_system("pitchfork")
    split = split_at_bifurcation(entry.system, np.zeros(1), np.zeros(1), 1)
    params = entry.params.replace(eps=0.01, sigma=0.05)
    dt, n = 5e-4, 400
    rec = simulate_reduced(split.system, params, [-0.3], n * dt, NoiseStream(4, 0), mode="bifurcation",
                           split=split, z0=[0.05], step=dt)
    dW = NoiseStream(4, 0).increments(n, 1, dt)[:, 0]
    z, y = 0.05, -0.3
    for j in range(n):
        z, y = z + (y * z - z**3) * dt / params.eps + params.sigma / np.sqrt(params.eps) * dW[j], y + dt
    assert rec.x[0, -1, 0] == pytest.approx(z, rel=1e-10)
    assert rec.y[0, -1, 0] == pytest.approx(y, rel=1e-12)


def test_reduced_noise_free_follows_orbit():
    entry = get_system("cubic")
    rec = simulate_reduced(entry.system, entry.params.replace(sigma=0.0), entry.y0, 1.0, NoiseStream(0, 0))
    orbit = integrate_reduced(entry.system, entry.params, entry.y0, 1.0)
    assert abs(rec.y[0, -1, 0] - orbit.y_det[-1, 0]) < 1e-3


@pytest.mark.parametrize("name", ["linear1d", "coupled1d"])
def test_reduced_deviation_bound(name):
    entry = get_system(name)
    params = entry.params.replace(eps=0.01, sigma=0.05, rho=0.5)
    dev = reduced_deviation(entry.system, params, entry.y0, 1.0, 200, seed=1)
    chi2 = chi_functions(integrate_reduced(entry.system, params, entry.y0, 1.0)).chi2[-1]
    bound = 5 * params.sigma * np.sqrt(params.eps) * (1 + np.sqrt(chi2))
    assert np.median(dev) <= bound


def test_ensemble_order_and_workers(monkeypatch):
    job = lambda s, e: np.arange(s, e)
    assert np.array_equal(np.concatenate(run_ensemble(job, 10, chunk=3, workers=4)), np.arange(10))
    monkeypatch.setenv("SLOWFAST_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
