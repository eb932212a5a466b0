"""NumPy reference implementations of the inner loops.

These define the semantics of the compiled module ``_kernels``; loops run
over time and are vectorised over paths (or over the second time index).
"""
import numpy as np


def propagate_linear(P, Q, z0, dW, stride):
    """Iterate ``z <- P_j z + Q_j dW_j`` for a batch of paths.

    P: (T, d, d), Q: (T, d, k), z0: (npath, d), dW: (npath, T, k).
    Returns the states at steps 0, stride, 2*stride, ... with shape
    ``(npath, T // stride + 1, d)``.
    """
    T, d = P.shape[0], P.shape[1]
    npath = z0.shape[0]
    out = np.empty((npath, T // stride + 1, d))
    z = np.array(z0, dtype=float)
    out[:, 0] = z
    r = 1
    for j in range(T):
        z = z @ P[j].T + dW[:, j] @ Q[j].T
        if (j + 1) % stride == 0:
            out[:, r] = z
            r += 1
    return out


def pitchfork_paths(z0, t0, dt, eps, sigma, dW, record_idx, delta, blowup):
    """Euler-Maruyama for eps dz = (y z - z^3) dt + sigma sqrt(eps) dW, y = t.

    Returns ``(z_rec, escape_idx)``: z at the requested step indices and the
    first step index j with t_j >= 0 and |z_j| > delta (-1 if none).  A path
    whose modulus exceeds ``blowup`` is frozen.
    """
    npath, T = dW.shape
    R = len(record_idx)
    zrec = np.full((npath, R), np.nan)
    esc = np.full(npath, -1, dtype=np.int64)
    a = dt / eps
    b = sigma / np.sqrt(eps)
    z = np.array(z0, dtype=float)
    alive = np.ones(npath, dtype=bool)
    r = 0
    for j in range(T + 1):
        t = t0 + j * dt
        while r < R and record_idx[r] == j:
            zrec[:, r] = z
            r += 1
        if t >= 0.0:
            hit = (esc < 0) & (np.abs(z) > delta)
            esc[hit] = j
        if j == T:
            break
        y = t
        zn = z + (y * z - z * z * z) * a + b * dW[:, j]
        z = np.where(alive, zn, z)
        alive &= np.abs(z) <= blowup
    return zrec, esc


def _spectral_norm(M):
    d = M.shape[-1]
    if d == 1:
        return np.abs(M[..., 0, 0])
    if d == 2:
        a, b, c, e = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
        s = a * a + b * b + c * c + e * e
        det = a * e - b * c
        disc = np.maximum(s * s - 4.0 * det * det, 0.0)
        return np.sqrt(0.5 * (s + np.sqrt(disc)))
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def propagator_norms(P):
    """Lower-triangular table N[i, j] = ||P_{i-1} ... P_j|| (N[i, i] = 1)."""
    T, d = P.shape[0], P.shape[1]
    N = np.zeros((T + 1, T + 1))
    N[0, 0] = 1.0
    M = np.eye(d)[None]
    for i in range(T):
        M = np.einsum("ab,jbc->jac", P[i], M)
        N[i + 1, : i + 1] = _spectral_norm(M)
        N[i + 1, i + 1] = 1.0
        M = np.concatenate([M, np.eye(d)[None]], axis=0)
    return N


def chi_integrals(times, norms, power, prefactor):
    """Running-sup double integrals over a norm table.

    For each grid time s_i the inner supremum over v in [u, s_i] is a suffix
    maximum of the row ``norms[i, :i+1]``; the outer integral over u uses the
    trapezoidal rule.  ``err`` is half the gap between left and right
    Riemann sums, a bound on the grid error of a monotone integrand.
    """
    T = len(times)
    chi = np.zeros(T)
    err = np.zeros(T)
    best = 0.0
    best_err = 0.0
    h = np.diff(times)
    for i in range(T):
        row = norms[i, : i + 1][::-1]
        w = np.maximum.accumulate(row)[::-1] ** power
        if i > 0:
            integ = np.sum(0.5 * (w[:-1] + w[1:]) * h[:i])
            e = np.sum(0.5 * np.abs(w[:-1] - w[1:]) * h[:i])
        else:
            integ = e = 0.0
        best = max(best, integ)
        best_err = max(best_err, e)
        chi[i] = prefactor * best
        err[i] = prefactor * best_err
    return chi, err


def first_crossing(q, level):
    """First column index with q >= level per row, -1 if never."""
    hit = q >= level
    idx = np.argmax(hit, axis=1).astype(np.int64)
    idx[~hit.any(axis=1)] = -1
    return idx
