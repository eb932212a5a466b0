import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowfast import _kernels_py as py
from slowfast import kernels

cy = pytest.importorskip("slowfast._kernels")


def _props(rng, T, d):
    P = np.eye(d) + 0.1 * rng.standard_normal((T, d, d))
    return P


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_propagate_linear_parity(seed, d, npath, stride):
    rng = np.random.default_rng(seed)
    T = 8
    P = _props(rng, T, d)
    Q = rng.standard_normal((T, d, 2))
    z0 = rng.standard_normal((npath, d))
    dW = rng.standard_normal((npath, T, 2))
    a = cy.propagate_linear(P, Q, z0, dW, stride)
    b = py.propagate_linear(P, Q, z0, dW, stride)
    assert a.shape == (npath, T // stride + 1, d)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-14)


def test_propagate_linear_reference_loop():
    rng = np.random.default_rng(1)
    P, Q = _props(rng, 5, 2), rng.standard_normal((5, 2, 1))
    z0, dW = rng.standard_normal((1, 2)), rng.standard_normal((1, 5, 1))
    z = z0[0].copy()
    for j in range(5):
        z = P[j] @ z + Q[j] @ dW[0, j]
    assert np.allclose(kernels.propagate_linear(P, Q, z0, dW)[0, -1], z)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 0.05))
def test_pitchfork_paths_bit_parity(seed, sigma):
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((6, 700)) * np.sqrt(5e-5)
    rec = np.array([0, 100, 699], dtype=np.int64)
    za, ea = cy.pitchfork_paths(np.zeros(6), -0.02, 5e-5, 1e-3, sigma, dW, rec, 0.1, 1e6)
    zb, eb = py.pitchfork_paths(np.zeros(6), -0.02, 5e-5, 1e-3, sigma, dW, rec, 0.1, 1e6)
    assert np.array_equal(za, zb) and np.array_equal(ea, eb)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_norms_and_chi_parity(seed, d):
    rng = np.random.default_rng(seed)
    P = _props(rng, 12, d)
    Na, Nb = cy.propagator_norms(P), py.propagator_norms(P)
    assert np.allclose(Na, Nb, rtol=1e-13)
    times = np.linspace(0.0, 1.0, 13)
    for power in (1, 2):
        ca, ea = cy.chi_integrals(times, Na, power, 1.0)
        cb, eb = py.chi_integrals(times, Nb, power, 1.0)
        assert np.allclose(ca, cb, rtol=1e-13, atol=1e-15) and np.allclose(ea, eb, rtol=1e-12, atol=1e-15)


def test_norm_table_definition():
    P = np.array([[[2.0]], [[3.0]], [[0.5]]])
    N = kernels.propagator_norms(P)
    # N[i, j] = ||P_{i-1} ... P_j||, identity on the diagonal
    assert N[3, 0] == pytest.approx(3.0) and N[2, 1] == pytest.approx(3.0) and N[1, 1] == 1.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-5, 5))
def test_first_crossing(values, level):
    q = np.array([values])
    got = cy.first_crossing(q, level)[0]
    assert got == py.first_crossing(q, level)[0]
    above = np.nonzero(q[0] >= level)[0]
    assert got == (above[0] if above.size else -1)


def test_pure_python_switch():
    env = dict(os.environ, SLOWFAST_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from slowfast import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
