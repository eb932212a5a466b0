"""Lyapunov equations, controllability and the concentration metric X̄(y, eps)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import IllConditioned, NotControllable, NotHurwitz
from .manifold import ManifoldPoint, local_frame
from .model import NoiseParams, SlowFastSystem

PAIR_TOL = 1e-12


def _blocks(T):
    """Diagonal block boundaries of a real quasi-upper-triangular matrix."""
    n = T.shape[0]
    starts, i = [], 0
    while i < n:
        size = 2 if i + 1 < n and T[i + 1, i] != 0.0 else 1
        starts.append((i, i + size))
        i += size
    return starts


def solve_lyapunov(A, Q):
    """Solve ``A X + X A^T + Q = 0`` for Hurwitz ``A`` (Bartels-Stewart).

    ``A`` is reduced to real Schur form ``A = U T U^T``; the transformed
    equation ``T Y + Y T^T = -U^T Q U`` is solved block by block from the
    bottom-right corner, each block being a Sylvester equation of size at
    most 2x2.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    eig = np.linalg.eigvals(A)
    if np.max(eig.real) >= 0.0:
        raise NotHurwitz(f"max Re eig(A) = {np.max(eig.real):.3e} >= 0")
    if np.min(np.abs(eig[:, None] + eig[None, :])) < PAIR_TOL:
        raise IllConditioned("eigenvalue pair a_i + a_j is numerically zero")
    if n == 1:
        X = -Q / (2.0 * A)
        return X
    T, U = sla.schur(A, output="real")
    C = -U.T @ Q @ U
    Y = np.zeros((n, n))
    blocks = _blocks(T)
    nb = len(blocks)
    for bi in range(nb - 1, -1, -1):
        i0, i1 = blocks[bi]
        for bj in range(nb - 1, -1, -1):
            j0, j1 = blocks[bj]
            rhs = C[i0:i1, j0:j1].copy()
            if i1 < n:
                rhs -= T[i0:i1, i1:] @ Y[i1:, j0:j1]
            if j1 < n:
                rhs -= Y[i0:i1, j1:] @ T[j0:j1, j1:].T
            Tii = T[i0:i1, i0:i1]
            Tjj = T[j0:j1, j0:j1]
            p, q = Tii.shape[0], Tjj.shape[0]
            # row-major vec: vec(Tii Y) = (Tii (x) I) vec Y, vec(Y Tjj^T) = (I (x) Tjj) vec Y
            K = np.kron(Tii, np.eye(q)) + np.kron(np.eye(p), Tjj)
            Y[i0:i1, j0:j1] = np.linalg.solve(K, rhs.reshape(-1)).reshape(p, q)
    X = U @ Y @ U.T
    return 0.5 * (X + X.T)


def solve_lyapunov_batch(A, Q):
    """Batched Lyapunov solve through the Kronecker sum (small n only).

    Used inside Monte Carlo loops where the metric is needed at every path;
    ``solve_lyapunov`` remains the reference solver.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[-1]
    if n == 1:
        return -Q / (2.0 * A)
    if n > 8:
        lead = A.shape[:-2]
        out = np.empty(lead + (n, n))
        for idx in np.ndindex(*lead):
            out[idx] = solve_lyapunov(A[idx], Q[idx])
        return out
    eye = np.eye(n)
    K = np.einsum("...ij,kl->...ikjl", A, eye) + np.einsum("ij,...kl->...ikjl", eye, A)
    K = K.reshape(A.shape[:-2] + (n * n, n * n))
    X = np.linalg.solve(K, -Q.reshape(Q.shape[:-2] + (n * n,))[..., None])[..., 0]
    X = X.reshape(Q.shape)
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def controllability_rank(A, F0, tol=None):
    """Rank of the Krylov matrix [F0, A F0, ..., A^{n-1} F0] (via SVD).

    Singular values below ``n * 1e-12 * s_max`` count as zero.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    F0 = np.asarray(F0, dtype=float)
    if F0.ndim == 1:
        F0 = F0[:, None]
    n = A.shape[0]
    blocks = [F0]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    K = np.hstack(blocks)
    s = np.linalg.svd(K, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, False
    thresh = (n * 1e-12 if tol is None else tol) * s[0]
    rank = int(np.sum(s > thresh))
    return rank, rank == n


@dataclass
class ConcentrationMetric:
    y: np.ndarray
    X_star: np.ndarray
    X_bar: np.ndarray
    Z_bar: np.ndarray
    cond: float
    controllable: bool
    min_eig: float
    xbar: np.ndarray


def _pd(X, n):
    w = np.linalg.eigvalsh(X)
    return w[0] > n * 1e-12 * w[-1], float(w[0])


def _xbar_from_frame(fr, batch=True):
    """X* and the once-corrected X̄ from a LocalFrame (batched)."""
    solve = solve_lyapunov_batch
    Fs = fr.F0_star
    X_star = solve(fr.A_star, Fs @ np.swapaxes(Fs, -1, -2))
    m = fr.y.shape[-1]
    drift = np.zeros_like(X_star)
    for j in range(m):
        Xs = []
        for side in range(2):
            Fsh = fr.F0_star_shift[side, j]
            Xs.append(solve(fr.A_star_shift[side, j], Fsh @ np.swapaxes(Fsh, -1, -2)))
        dX = (Xs[1] - Xs[0]) / (2.0 * fr.y_step[:, j, None, None])
        drift += dX * fr.g_bar[:, j, None, None]
    F0 = fr.F0
    X_bar = solve(fr.A, F0 @ np.swapaxes(F0, -1, -2) - fr.eps * drift)
    return X_star, X_bar


def metric_at(sys: SlowFastSystem, params: NoiseParams, mp: ManifoldPoint | np.ndarray) -> ConcentrationMetric:
    """Concentration metric at one slow point.

    ``X*`` solves the Lyapunov equation with ``A*(y)`` and ``F(x*, y, 0)``;
    ``X̄`` solves it with ``A(y, eps)``, ``F0(y, eps)`` after one Picard sweep
    of the invariance equation (``eps`` times the derivative of ``X*`` along
    the reduced flow moved to the forcing); ``Z̄ = -sqrt(eps) rho A^{-1} F0 G0^T``.
    """
    if isinstance(mp, ManifoldPoint):
        y, guess = mp.y, mp.x_star
    else:
        y, guess = np.atleast_1d(np.asarray(mp, dtype=float)), None
    fr = local_frame(sys, y[None], params.eps, params.rho, None if guess is None else guess[None])
    A_star = fr.A_star[0]
    if np.max(np.linalg.eigvals(A_star).real) >= 0.0:
        raise NotHurwitz("slow manifold is not asymptotically stable at y = %s" % (y,))
    rank, ok = controllability_rank(A_star, fr.F0_star[0])
    if not ok:
        raise NotControllable(f"(A*, F0) has controllability rank {rank} < n = {sys.n}")
    X_star = solve_lyapunov(A_star, fr.F0_star[0] @ fr.F0_star[0].T)
    pd, _ = _pd(X_star, sys.n)
    if not pd:
        raise NotControllable("X* is singular although the rank test passed")
    _, X_bar = _xbar_from_frame(fr)
    X_bar = X_bar[0]
    A = fr.A[0]
    Z_bar = -np.sqrt(params.eps) * params.rho * np.linalg.solve(A, fr.F0[0] @ fr.G0[0].T)
    pd_bar, lo = _pd(X_bar, sys.n)
    return ConcentrationMetric(
        y=y, X_star=X_star, X_bar=X_bar, Z_bar=Z_bar, cond=float(np.linalg.cond(X_bar)),
        controllable=bool(ok and pd_bar), min_eig=lo, xbar=fr.xbar[0],
    )


class MetricField:
    """x̄(y, eps) and X̄(y, eps) evaluated on demand for batches of slow points."""

    def __init__(self, sys: SlowFastSystem, params: NoiseParams):
        self.sys = sys
        self.params = params

    def evaluate(self, y, guess=None):
        fr = local_frame(self.sys, y, self.params.eps, self.params.rho, guess)
        _, X_bar = _xbar_from_frame(fr)
        return fr.xbar, X_bar, fr.x_star
