"""Deterministic objects along a reduced orbit.

The reduced orbit ``ydet`` is sampled on one uniform grid together with the
linearisation ``A, B, C, F0, G0`` at every grid point and at every interval
midpoint.  Principal solutions are products of per-interval propagators
obtained from a fourth-order Magnus step, so the cocycle property holds to
rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.integrate import simpson, solve_ivp

from . import kernels
from .errors import GridMismatch, LeftDomainImmediately, PSDLoss, StiffnessFailure
from .manifold import adiabatic_batch, local_frame
from .model import NoiseParams, SlowFastSystem

PSD_TOL = -1e-8
GRID_TOL = 1e-9


def default_step(eps, t_end=1.0):
    """Largest uniform step <= min(eps/20, 1/200) that divides ``t_end``."""
    h = min(eps / 20.0, 1.0 / 200.0)
    return t_end / max(1, int(np.ceil(t_end / h - 1e-9)))


@dataclass(frozen=True)
class OrbitTable:
    """Reduced orbit and linearisation samples.

    ``*_mid`` arrays hold the same quantities at the interval midpoints
    (length T for T intervals).  ``exit_index`` is the first grid index whose
    slow point lies outside the domain (the table is truncated before it).
    """

    times: np.ndarray
    y_det: np.ndarray
    xbar: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F0: np.ndarray
    G0: np.ndarray
    A_mid: np.ndarray
    B_mid: np.ndarray
    C_mid: np.ndarray
    F0_mid: np.ndarray
    G0_mid: np.ndarray
    eps: float
    rho: float
    exit_index: Optional[int] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def step(self):
        return float(self.times[1] - self.times[0])

    @property
    def n(self):
        return self.A.shape[-1]

    @property
    def m(self):
        return self.B.shape[-1]

    @classmethod
    def constant(cls, times, eps, A, B, C, F0=None, G0=None, rho=0.0, y=None):
        """Table with frozen coefficients (handy for closed-form checks)."""
        times = np.asarray(times, dtype=float)
        A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
        n, m = A.shape[0], B.shape[0]
        F0 = np.zeros((n, 1)) if F0 is None else np.atleast_2d(np.asarray(F0, dtype=float))
        G0 = np.zeros((m, F0.shape[1])) if G0 is None else np.atleast_2d(np.asarray(G0, dtype=float))
        T = len(times)

        def rep(M, count):
            return np.broadcast_to(M, (count,) + M.shape).copy()

        y = np.zeros((T, m)) if y is None else np.asarray(y, dtype=float).reshape(T, m)
        return cls(times=times, y_det=y, xbar=np.zeros((T, n)),
                   A=rep(A, T), B=rep(B, T), C=rep(C, T), F0=rep(F0, T), G0=rep(G0, T),
                   A_mid=rep(A, T - 1), B_mid=rep(B, T - 1), C_mid=rep(C, T - 1),
                   F0_mid=rep(F0, T - 1), G0_mid=rep(G0, T - 1), eps=float(eps), rho=float(rho))

    def fast_track(self):
        if "fast" not in self._cache:
            self._cache["fast"] = MatrixTrack(self.times, self.A, self.A_mid, 1.0 / self.eps)
        return self._cache["fast"]

    def slow_track(self):
        if "slow" not in self._cache:
            self._cache["slow"] = MatrixTrack(self.times, self.B, self.B_mid, 1.0)
        return self._cache["slow"]

    def joint_track(self):
        """Track of the block matrix [[A/eps, 0], [C, B]] for (xi, eta)."""
        if "joint" not in self._cache:
            def block(A, B, C):
                top = np.concatenate([A / self.eps, np.zeros(A.shape[:-1] + (B.shape[-1],))], axis=-1)
                return np.concatenate([top, np.concatenate([C, B], axis=-1)], axis=-2)
            self._cache["joint"] = MatrixTrack(self.times, block(self.A, self.B, self.C),
                                               block(self.A_mid, self.B_mid, self.C_mid), 1.0)
        return self._cache["joint"]

    def index(self, t):
        """Grid index of time ``t``; GridMismatch when ``t`` is off-grid."""
        return _grid_index(self.times, t)


def _grid_index(times, t):
    j = int(np.rint((t - times[0]) / (times[1] - times[0])))
    if j < 0 or j >= len(times) or abs(times[j] - t) > GRID_TOL * max(1.0, abs(t)):
        raise GridMismatch(f"time {t} is not a grid point")
    return j


def _reduced_rhs(sys, eps):
    state = {"guess": None}

    def rhs(t, y):
        yy = y[None]
        xb, xs = adiabatic_batch(sys, yy, eps, state["guess"])
        state["guess"] = xs
        return np.asarray(sys.g(xb, yy, eps), dtype=float)[0]

    return rhs


def integrate_reduced(sys: SlowFastSystem, params: NoiseParams, y0, t_end, step=None,
                      rtol=1e-10, atol=1e-12) -> OrbitTable:
    """Integrate the reduced equation ``y' = g(xbar(y, eps), y, eps)``.

    RK45 with dense output evaluated on a uniform grid; the linearisation is
    then filled in at grid points and interval midpoints.
    """
    eps, rho = params.eps, params.rho
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if not sys.in_domain(y0):
        raise LeftDomainImmediately(f"y0 = {y0} is outside the domain")
    h = default_step(eps, t_end) if step is None else float(step)
    nsteps = int(round(t_end / h))
    if abs(nsteps * h - t_end) > GRID_TOL * max(1.0, t_end):
        raise GridMismatch("step does not divide t_end")
    times = np.linspace(0.0, t_end, nsteps + 1)
    sol = solve_ivp(_reduced_rhs(sys, eps), (0.0, t_end), y0, method="RK45", dense_output=True,
                    rtol=rtol, atol=atol)
    if sol.status < 0:
        raise StiffnessFailure(f"reduced flow integration failed: {sol.message}")
    y = sol.sol(times).T
    inside = sys.in_domain(y)
    exit_index = None
    if not np.all(inside):
        exit_index = int(np.argmin(inside))
        if exit_index <= 1:
            raise LeftDomainImmediately("reduced orbit leaves the domain within one step")
        times, y = times[:exit_index], y[:exit_index]
    ymid = sol.sol(0.5 * (times[:-1] + times[1:])).T
    return orbit_from_samples(sys, times, y, ymid, eps, rho, exit_index)


def orbit_from_samples(sys, times, y, ymid, eps, rho, exit_index=None):
    fr = local_frame(sys, y, eps, rho)
    frm = local_frame(sys, ymid, eps, rho, fr.x_star[:-1])
    return OrbitTable(times=np.asarray(times, dtype=float), y_det=y, xbar=fr.xbar,
                      A=fr.A, B=fr.B, C=fr.C, F0=fr.F0, G0=fr.G0,
                      A_mid=frm.A, B_mid=frm.B, C_mid=frm.C, F0_mid=frm.F0, G0_mid=frm.G0,
                      eps=eps, rho=rho, exit_index=exit_index)


# ---------------------------------------------------------------------------
# principal solutions


@dataclass(frozen=True)
class MatrixTrack:
    """Samples of a matrix coefficient ``M(t)`` for the ODE ``z' = scale M(t) z``."""

    times: np.ndarray
    values: np.ndarray
    mid: np.ndarray
    scale: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def step_propagators(self):
        """Per-interval propagators from the fourth-order Magnus expansion

            Omega = h/6 (M0 + 4 Mm + M1) + h^2/12 [M1, M0],

        exact for constant coefficients.
        """
        if "P" not in self._cache:
            h = np.diff(self.times)[:, None, None] * self.scale
            M0, Mm, M1 = self.values[:-1], self.mid, self.values[1:]
            omega = h / 6.0 * (M0 + 4.0 * Mm + M1) + h * h / 12.0 * (M1 @ M0 - M0 @ M1)
            self._cache["P"] = sla.expm(omega)
        return self._cache["P"]

    def half_propagators(self):
        """Propagators from each midpoint to the right end of its interval."""
        if "Ph" not in self._cache:
            h = 0.5 * np.diff(self.times)[:, None, None] * self.scale
            M0, M1 = self.mid, self.values[1:]
            omega = 0.5 * h * (M0 + M1) + h * h / 12.0 * (M1 @ M0 - M0 @ M1)
            self._cache["Ph"] = sla.expm(omega)
        return self._cache["Ph"]


def principal_solution(track: MatrixTrack, s, t) -> np.ndarray:
    """``U(t, s)`` as the ordered product of step propagators."""
    if t < s:
        raise GridMismatch("principal_solution needs s <= t")
    i, j = _grid_index(track.times, s), _grid_index(track.times, t)
    P = track.step_propagators()
    U = np.eye(track.values.shape[-1])
    for k in range(i, j):
        U = P[k] @ U
    return U


def forward_products(P, start=0):
    """``[U(t_start, t_start), U(t_start+1, t_start), ...]`` as one array."""
    d = P.shape[-1]
    out = np.empty((P.shape[0] - start + 1, d, d))
    out[0] = np.eye(d)
    for k in range(start, P.shape[0]):
        out[k - start + 1] = P[k] @ out[k - start]
    return out


def coupling_block(orbit: OrbitTable, s, t) -> np.ndarray:
    """``S(t, s) = int_s^t V(t, u) C(u) U(u, s) du`` by composite Simpson."""
    if t < s:
        raise GridMismatch("coupling_block needs s <= t")
    i, j = orbit.index(s), orbit.index(t)
    if i == j:
        return np.zeros((orbit.m, orbit.n))
    PU = orbit.fast_track().step_propagators()
    PV = orbit.slow_track().step_propagators()
    U = forward_products(PU[:j], i)                 # U(u_k, s), k = i..j
    V = np.empty((j - i + 1, orbit.m, orbit.m))     # V(t, u_k)
    V[-1] = np.eye(orbit.m)
    for k in range(j - 1, i - 1, -1):
        V[k - i] = V[k - i + 1] @ PV[k]
    integrand = V @ orbit.C[i:j + 1] @ U
    return simpson(integrand, x=orbit.times[i:j + 1], axis=0)


# ---------------------------------------------------------------------------
# chi functions


@dataclass
class ChiFunctions:
    times: np.ndarray
    chi1: np.ndarray
    chi2: np.ndarray
    err1: np.ndarray
    err2: np.ndarray
    variant: str


def _coarsen(P, times, max_points):
    T = P.shape[0]
    stride = max(1, int(np.ceil(T / (max_points - 1))))
    while T % stride:
        stride += 1
    if stride == 1:
        return P, times
    Pc = np.empty((T // stride,) + P.shape[1:])
    for b in range(T // stride):
        M = np.eye(P.shape[-1])
        for k in range(b * stride, (b + 1) * stride):
            M = P[k] @ M
        Pc[b] = M
    return Pc, times[::stride]


def chi_from_propagators(P, times, prefactor=1.0, variant="slow", max_points=2001) -> ChiFunctions:
    P, times = _coarsen(np.asarray(P, dtype=float), np.asarray(times, dtype=float), max_points)
    N = kernels.propagator_norms(P)
    c1, e1 = kernels.chi_integrals(times, N, 1.0, prefactor)
    c2, e2 = kernels.chi_integrals(times, N, 2.0, prefactor)
    return ChiFunctions(times, c1, c2, e1, e2, variant)


def chi_functions(orbit: OrbitTable, variant="slow", max_points=2001) -> ChiFunctions:
    """chi^(1), chi^(2) on the orbit grid.

    ``variant="slow"`` uses ``V`` (the slow principal solution);
    ``variant="bifurcation"`` uses the fast principal solution of the
    orbit's ``A`` track (the critical block ``A^0`` for bifurcation runs)
    with the ``1/eps`` prefactor.
    """
    if variant == "slow":
        P, pref = orbit.slow_track().step_propagators(), 1.0
    elif variant == "bifurcation":
        P, pref = orbit.fast_track().step_propagators(), 1.0 / orbit.eps
    else:
        raise ValueError(f"unknown chi variant {variant!r}")
    return chi_from_propagators(P, orbit.times, pref, variant, max_points)


# ---------------------------------------------------------------------------
# covariance system


@dataclass
class CovarianceTrack:
    times: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray
    min_eig: np.ndarray


def _cov_rhs(eps, rho, A, B, C, F0, G0):
    se = np.sqrt(eps)
    FF = F0 @ F0.T
    FG = se * rho * F0 @ G0.T
    GG = rho * rho * G0 @ G0.T

    def rhs(X, Z, Y):
        dX = (A @ X + X @ A.T + FF) / eps
        dZ = (A @ Z + FG) / eps + Z @ B.T + X @ C.T
        CZ = C @ Z
        dY = B @ Y + Y @ B.T + CZ + CZ.T + GG
        return dX, dZ, dY

    return rhs


def covariance_evolution(orbit: OrbitTable, params: NoiseParams, X0, Z0, Y0) -> CovarianceTrack:
    """Classical RK4 for the (X, Z, Y) system along the orbit grid.

    Stage coefficients come from the grid and midpoint samples.  X and Y are
    symmetrised after each step; a minimum eigenvalue below -1e-8 raises
    PSDLoss instead of being projected away.
    """
    eps, rho = orbit.eps, params.rho
    n, m = orbit.n, orbit.m
    X = np.array(np.atleast_2d(X0), dtype=float).reshape(n, n)
    Z = np.array(np.atleast_2d(Z0), dtype=float).reshape(n, m)
    Y = np.array(np.atleast_2d(Y0), dtype=float).reshape(m, m)
    if eps > 0 and orbit.step > eps / 20.0 * (1 + 1e-9):
        raise StiffnessFailure("covariance grid step exceeds eps/20")
    T = len(orbit.times)
    Xs, Zs, Ys = np.empty((T, n, n)), np.empty((T, n, m)), np.empty((T, m, m))
    lo = np.empty(T)
    Xs[0], Zs[0], Ys[0] = X, Z, Y
    lo[0] = min(np.linalg.eigvalsh(X)[0], np.linalg.eigvalsh(Y)[0])

    def coeffs(src, k, mid):
        if mid:
            return src.A_mid[k], src.B_mid[k], src.C_mid[k], src.F0_mid[k], src.G0_mid[k]
        return src.A[k], src.B[k], src.C[k], src.F0[k], src.G0[k]

    for k in range(T - 1):
        h = orbit.times[k + 1] - orbit.times[k]
        f0 = _cov_rhs(eps, rho, *coeffs(orbit, k, False))
        fm = _cov_rhs(eps, rho, *coeffs(orbit, k, True))
        f1 = _cov_rhs(eps, rho, *coeffs(orbit, k + 1, False))
        k1 = f0(X, Z, Y)
        k2 = fm(X + 0.5 * h * k1[0], Z + 0.5 * h * k1[1], Y + 0.5 * h * k1[2])
        k3 = fm(X + 0.5 * h * k2[0], Z + 0.5 * h * k2[1], Y + 0.5 * h * k2[2])
        k4 = f1(X + h * k3[0], Z + h * k3[1], Y + h * k3[2])
        X = X + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Z = Z + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Y = Y + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise StiffnessFailure("covariance integration produced non-finite values")
        X = 0.5 * (X + X.T)
        Y = 0.5 * (Y + Y.T)
        lo[k + 1] = min(np.linalg.eigvalsh(X)[0], np.linalg.eigvalsh(Y)[0])
        if lo[k + 1] < PSD_TOL * max(1.0, np.abs(X).max(), np.abs(Y).max()):
            raise PSDLoss(f"covariance lost positivity at t = {orbit.times[k + 1]:.6g}")
        Xs[k + 1], Zs[k + 1], Ys[k + 1] = X, Z, Y
    return CovarianceTrack(orbit.times, Xs, Zs, Ys, Ys[0].copy(), lo)


def propagator_norm_series(track: MatrixTrack):
    """``||U(t_k, t_0)||`` for every grid time."""
    U = forward_products(track.step_propagators())
    return np.linalg.norm(U, ord=2, axis=(-2, -1))
