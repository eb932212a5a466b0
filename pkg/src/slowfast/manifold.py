"""Slow manifold, first-order adiabatic correction and the linearisation along it.

All heavy lifting is done on batches of slow points ``y`` with shape
``(P, m)`` so that Monte Carlo loops can evaluate the manifold for every path
at once; the single-point functions below are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoConvergence, SingularJacobian
from .model import SlowFastSystem

MAX_NEWTON = 50
MAX_HALVINGS = 6
COND_LIMIT = 1e13
Y_STEP = 1e-5

STABLE = "uniformly-asymptotically-stable"
UNSTABLE = "unstable"
HYPERBOLIC = "hyperbolic"
NON_HYPERBOLIC = "non-hyperbolic"


def classify(spectrum, margin=1e-6):
    re = np.real(np.asarray(spectrum))
    if np.max(re) <= -margin:
        return STABLE
    if np.min(np.abs(re)) < margin:
        return NON_HYPERBOLIC
    if np.min(re) >= margin:
        return UNSTABLE
    return HYPERBOLIC


def _solve(A, b):
    """Batched solve that turns numerical singularity into SingularJacobian."""
    if A.shape[-1] == 1:
        a = A[..., 0, 0]
        if np.any(np.abs(a) < 1e-300) or not np.all(np.isfinite(a)):
            raise SingularJacobian("fast Jacobian is singular (non-hyperbolic point)")
        return b / a.reshape(a.shape + (1,) * (b.ndim - a.ndim))
    cond = np.linalg.cond(A)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        raise SingularJacobian("fast Jacobian is singular (non-hyperbolic point)")
    return np.linalg.solve(A, b)


def newton_batch(sys: SlowFastSystem, y, x0, tol=1e-12, eps=0.0):
    """Damped Newton iteration for f(x, y, eps) = 0 on a batch of slow points.

    Returns ``(x, J)`` with ``J = d_x f`` at the root.  The step is halved
    (up to 6 times) for every point whose residual would grow.
    """
    y = np.asarray(y, dtype=float)
    x = np.array(x0, dtype=float, copy=True)
    r = sys.f(x, y, eps)
    rn = np.linalg.norm(r, axis=-1)
    for _ in range(MAX_NEWTON):
        if np.all(rn <= tol):
            return x, sys.dfdx(x, y, eps)
        J = sys.dfdx(x, y, eps)
        dx = -_solve(J, r[..., None])[..., 0]
        lam = np.ones(rn.shape)
        for _ in range(MAX_HALVINGS + 1):
            xt = x + lam[..., None] * dx
            rt = sys.f(xt, y, eps)
            rtn = np.linalg.norm(rt, axis=-1)
            worse = (rtn > rn) & (rn > tol)
            if not np.any(worse):
                break
            lam = np.where(worse, 0.5 * lam, lam)
        active = rn > tol
        x = np.where(active[..., None], xt, x)
        r = np.where(active[..., None], rt, r)
        rn = np.where(active, rtn, rn)
        if not np.all(np.isfinite(x)):
            raise NoConvergence("Newton iterate diverged")
    if np.all(rn <= tol):
        return x, sys.dfdx(x, y, eps)
    raise NoConvergence(f"Newton did not converge in {MAX_NEWTON} iterations (residual {np.max(rn):.3e})")


def _order_one(sys, y, guess, tol):
    """x*, A*, d_y x*, x1 and F(x*, y, 0) on a batch."""
    xs, As = newton_batch(sys, y, guess, tol)
    fy = sys.dfdy(xs, y, 0.0)
    dxs = -_solve(As, fy)
    rhs = dxs @ sys.g(xs, y, 0.0)[..., None] - sys.dfde(xs, y, 0.0)[..., None]
    x1 = _solve(As, rhs)[..., 0]
    return xs, As, dxs, x1, np.asarray(sys.F(xs, y, 0.0), dtype=float)


@dataclass
class LocalFrame:
    """Adiabatic manifold data and linearisation at a batch of slow points.

    Shapes (P leading): ``x_star, x1, xbar`` (P, n); ``dxstar_dy, dxbar_dy``
    (P, n, m); ``A_star, A`` (P, n, n); ``B`` (P, m, m); ``C`` (P, m, n);
    ``F0`` (P, n, k); ``G0`` (P, m, k).  ``A_star_shift`` and
    ``F0_star_shift`` hold the eps = 0 data at ``y -+ h e_j`` (index 0 / 1)
    for derivatives of the Lyapunov solution along y.
    """

    y: np.ndarray
    eps: float
    rho: float
    x_star: np.ndarray
    x1: np.ndarray
    xbar: np.ndarray
    dxstar_dy: np.ndarray
    dxbar_dy: np.ndarray
    A_star: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F0: np.ndarray
    G0: np.ndarray
    F0_star: np.ndarray
    g_bar: np.ndarray
    y_step: np.ndarray
    A_star_shift: np.ndarray
    F0_star_shift: np.ndarray


def local_frame(sys: SlowFastSystem, y, eps, rho=0.0, guess=None, tol=1e-12) -> LocalFrame:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    P, m = y.shape
    if guess is None:
        guess = np.zeros((P, sys.n))
    guess = np.broadcast_to(np.asarray(guess, dtype=float), (P, sys.n))
    xs, As, dxs, x1, Fs = _order_one(sys, y, guess, tol)

    h = Y_STEP * np.maximum(1.0, np.abs(y))
    dx1 = np.empty((P, sys.n, m))
    A_shift = np.empty((2, m, P, sys.n, sys.n))
    F_shift = np.empty((2, m, P, sys.n, sys.k))
    for j in range(m):
        for side, sgn in enumerate((-1.0, 1.0)):
            ys = y.copy()
            ys[:, j] += sgn * h[:, j]
            guess_s = xs + sgn * h[:, j, None] * dxs[:, :, j]
            _, As_s, _, x1_s, Fs_s = _order_one(sys, ys, guess_s, tol)
            A_shift[side, j] = As_s
            F_shift[side, j] = Fs_s
            if side == 0:
                x1_m = x1_s
            else:
                dx1[:, :, j] = (x1_s - x1_m) / (2.0 * h[:, j, None])

    xbar = xs + eps * x1
    dxbar = dxs + eps * dx1
    fx = sys.dfdx(xbar, y, eps)
    C = sys.dgdx(xbar, y, eps)
    A = fx - eps * dxbar @ C
    B = C @ dxbar + sys.dgdy(xbar, y, eps)
    G0 = np.asarray(sys.G(xbar, y, eps), dtype=float)
    F0 = np.asarray(sys.F(xbar, y, eps), dtype=float) - rho * np.sqrt(eps) * dxbar @ G0
    return LocalFrame(
        y=y, eps=eps, rho=rho, x_star=xs, x1=x1, xbar=xbar, dxstar_dy=dxs, dxbar_dy=dxbar,
        A_star=As, A=A, B=B, C=C, F0=F0, G0=G0, F0_star=Fs,
        g_bar=np.asarray(sys.g(xbar, y, eps), dtype=float), y_step=h,
        A_star_shift=A_shift, F0_star_shift=F_shift,
    )


def adiabatic_batch(sys, y, eps, guess=None, tol=1e-12):
    """x̄(y, eps) = x*(y) + eps x1(y) for a batch; returns (xbar, x_star)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if guess is None:
        guess = np.zeros((y.shape[0], sys.n))
    xs, _, _, x1, _ = _order_one(sys, y, guess, tol)
    return xs + eps * x1, xs


# ---------------------------------------------------------------------------
# single-point interface


@dataclass
class ManifoldPoint:
    y: np.ndarray
    x_star: np.ndarray
    A_star: np.ndarray
    spectrum: np.ndarray
    stability_class: str
    x1: Optional[np.ndarray] = None
    A_eps: Optional[np.ndarray] = None

    @property
    def max_re(self):
        return float(np.max(np.real(self.spectrum)))


def solve_slow_manifold(sys, y, x_guess, newton_tol=1e-12, margin=1e-6) -> ManifoldPoint:
    if newton_tol <= 0:
        raise ValueError("newton_tol must be positive")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xg = np.atleast_1d(np.asarray(x_guess, dtype=float))
    x, J = newton_batch(sys, y[None], xg[None], newton_tol)
    A = J[0]
    spec = np.linalg.eigvals(A)
    return ManifoldPoint(y=y, x_star=x[0], A_star=A, spectrum=spec,
                         stability_class=classify(spec, margin))


def adiabatic_correction(sys, mp: ManifoldPoint) -> np.ndarray:
    """First-order term x1 of the adiabatic manifold at ``mp``.

    Solves ``A* x1 = (d_y x*) g(x*, y, 0) - d_eps f(x*, y, 0)`` with
    ``d_y x* = -A*^{-1} d_y f`` from the implicit function theorem.
    """
    y = mp.y[None]
    x = mp.x_star[None]
    As = mp.A_star[None]
    dxs = -_solve(As, sys.dfdy(x, y, 0.0))
    rhs = dxs @ sys.g(x, y, 0.0)[..., None] - sys.dfde(x, y, 0.0)[..., None]
    x1 = _solve(As, rhs)[0, :, 0]
    mp.x1 = x1
    return x1


def adiabatic_point(sys, y, eps, x_guess=None, newton_tol=1e-12):
    """Truncated adiabatic manifold x*(y) + eps x1(y); error is O(eps^2)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    guess = np.zeros(sys.n) if x_guess is None else x_guess
    mp = solve_slow_manifold(sys, y, guess, newton_tol)
    if eps == 0.0:
        return mp.x_star
    return mp.x_star + eps * adiabatic_correction(sys, mp)


def linearization(sys, y, eps, rho=0.0, x_guess=None) -> ManifoldPoint:
    """ManifoldPoint with ``x1`` and ``A_eps`` filled in."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    fr = local_frame(sys, y[None], eps, rho, None if x_guess is None else np.asarray(x_guess)[None])
    spec = np.linalg.eigvals(fr.A_star[0])
    return ManifoldPoint(y=y, x_star=fr.x_star[0], A_star=fr.A_star[0], spectrum=spec,
                         stability_class=classify(spec), x1=fr.x1[0], A_eps=fr.A[0])


def invariance_residual(sys, y_grid, eps):
    """Residual of the invariance equation eps d_y x̄ g(x̄) = f(x̄) for the
    truncated manifold x̄ = x* + eps x1, on every grid point."""
    y = np.atleast_2d(np.asarray(y_grid, dtype=float))
    if y.shape[0] == 1 and sys.m == 1 and y.shape[1] != 1:
        y = y.T
    fr = local_frame(sys, y, eps)
    xb = fr.xbar
    lhs = eps * (fr.dxbar_dy @ sys.g(xb, y, eps)[..., None])[..., 0]
    return np.linalg.norm(sys.f(xb, y, eps) - lhs, axis=-1)
