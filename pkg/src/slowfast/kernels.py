"""Kernel dispatch: the compiled extension when available, NumPy otherwise.

Set ``SLOWFAST_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("SLOWFAST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def _c(a, dtype=float):
    return np.ascontiguousarray(a, dtype=dtype)


def propagate_linear(P, Q, z0, dW, stride=1):
    if P.shape[0] % stride:
        raise ValueError("number of steps must be a multiple of the record stride")
    return _impl.propagate_linear(_c(P), _c(Q), _c(z0), _c(dW), int(stride))


def pitchfork_paths(z0, t0, dt, eps, sigma, dW, record_idx, delta, blowup=1e6):
    return _impl.pitchfork_paths(_c(z0), float(t0), float(dt), float(eps), float(sigma), _c(dW),
                                 _c(record_idx, np.int64), float(delta), float(blowup))


def propagator_norms(P):
    P = _c(P)
    if P.shape[1] > 2:
        return _kernels_py.propagator_norms(P)
    return _impl.propagator_norms(P)


def chi_integrals(times, norms, power, prefactor=1.0):
    return _impl.chi_integrals(_c(times), _c(norms), float(power), float(prefactor))


def first_crossing(q, level):
    return _impl.first_crossing(_c(q), float(level))
