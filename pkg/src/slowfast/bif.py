"""Bifurcation regime: splitting into stable and critical fast modes, the
centre manifold, B^-(h) exits, full-vs-reduced coupling and the pitchfork
scaling experiment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import kernels
from .errors import (NoConvergence, NoSpectralGap, RegimeViolation, SingularJacobian,
                     WrongCriticalCount)
from .exitlab import ExitAccumulator, ExitCurve, curve_from_first_indices, quadratic_form
from .flow import MatrixTrack
from .lyap import solve_lyapunov_batch
from .manifold import _solve
from .model import NoiseParams, SlowFastSystem
from .sde import NoiseBlock, run_ensemble, simulate_full, simulate_reduced

DIFF_STEP = 1e-5


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSystem:
    """Fast variables in coordinates x = x_hat + M (x^-, z).

    ``system`` is the conjugated slow-fast system whose fast state is
    (x^-, z); its first ``n - q`` fast components are the stable block.
    """

    q: int
    transform: np.ndarray
    inverse: np.ndarray
    system: SlowFastSystem
    A_minus: np.ndarray
    A_zero: np.ndarray
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    radius: float = 0.5
    block_residual: float = 0.0

    @property
    def p(self):
        return self.system.n - self.q

    def in_N(self, z, y):
        """Box neighbourhood of (z_hat, y_hat) of half-width ``radius``."""
        zy = np.concatenate([np.asarray(z, float), np.asarray(y, float)], axis=-1)
        c = np.concatenate([self.z_hat, self.y_hat])
        return np.all(np.abs(zy - c) <= self.radius, axis=-1)

    def to_split(self, x):
        return (np.asarray(x, float) - self.x_hat) @ self.inverse.T

    def from_split(self, u):
        return self.x_hat + np.asarray(u, float) @ self.transform.T

    def centre_manifold(self, z, y, eps, guess=None):
        """x^-bar(z, y, eps) for a batch; shape (P, n - q)."""
        return _centre_batch(self, z, y, eps, 0.0, guess, derivatives=False)["xbar"]


def _conjugate(sys: SlowFastSystem, x_hat, M, Minv):
    def f(u, y, e):
        return sys.f(x_hat + u @ M.T, y, e) @ Minv.T

    def F(u, y, e):
        return Minv @ np.asarray(sys.F(x_hat + u @ M.T, y, e), dtype=float)

    def g(u, y, e):
        return sys.g(x_hat + u @ M.T, y, e)

    def G(u, y, e):
        return sys.G(x_hat + u @ M.T, y, e)

    def jfx(u, y, e):
        return Minv @ sys.dfdx(x_hat + u @ M.T, y, e) @ M

    def jfy(u, y, e):
        return Minv @ sys.dfdy(x_hat + u @ M.T, y, e)

    def jgx(u, y, e):
        return sys.dgdx(x_hat + u @ M.T, y, e) @ M

    def jgy(u, y, e):
        return sys.dgdy(x_hat + u @ M.T, y, e)

    return SlowFastSystem(n=sys.n, m=sys.m, k=sys.k, f=f, g=g, F=F, G=G, box=sys.box, domain=None,
                          jac_f_x=jfx, jac_f_y=jfy, jac_g_x=jgx, jac_g_y=jgy, name=sys.name + "_split")


def split_at_bifurcation(sys: SlowFastSystem, x_hat, y_hat, q, margin=1e-6, radius=0.5) -> SplitSystem:
    """Block-diagonalise d_x f at a bifurcation point.

    An ordered real Schur form puts the stable eigenvalues first; a
    Sylvester solve removes the coupling block, giving ``M^{-1} J M =
    diag(A^-, A^0)``.  Columns are scaled to unit length with a positive
    largest entry, so an already block-diagonal Jacobian gives M = I.
    """
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=float))
    res = np.linalg.norm(sys.f(x_hat, y_hat, 0.0))
    if res > 1e-10:
        raise NoConvergence(f"(x_hat, y_hat) is not an equilibrium (|f| = {res:.3e})")
    J = np.asarray(sys.dfdx(x_hat, y_hat, 0.0), dtype=float)
    n = J.shape[0]
    lam = np.linalg.eigvals(J)
    crit = np.abs(lam.real) < margin
    stable = lam.real <= -10.0 * margin
    if not np.all(crit | stable):
        raise NoSpectralGap(f"spectrum {lam} does not separate into critical and stable parts")
    if int(np.sum(crit)) != q:
        raise WrongCriticalCount(f"found {int(np.sum(crit))} critical eigenvalues, expected {q}")
    p = n - q
    T, U, _ = sla.schur(J, output="real", sort=lambda re, im: re <= -10.0 * margin)
    if p and q:
        R = sla.solve_sylvester(T[:p, :p], -T[p:, p:], -T[:p, p:])
        W = np.eye(n)
        W[:p, p:] = R
        M = U @ W
    else:
        M = U
    # normalise columns
    M = M / np.linalg.norm(M, axis=0)
    sgn = np.sign(M[np.argmax(np.abs(M), axis=0), np.arange(n)])
    M = M * sgn
    if np.linalg.cond(M) > 1e6:
        raise NoSpectralGap("splitting transform is ill-conditioned")
    Minv = np.linalg.inv(M)
    Jt = Minv @ J @ M
    off = np.linalg.norm(Jt[:p, p:]) + np.linalg.norm(Jt[p:, :p]) if p and q else 0.0
    split_sys = _conjugate(sys, x_hat, M, Minv)
    return SplitSystem(q=q, transform=M, inverse=Minv, system=split_sys, A_minus=Jt[:p, :p],
                       A_zero=Jt[p:, p:], x_hat=x_hat, y_hat=y_hat, z_hat=np.zeros(q),
                       radius=float(radius), block_residual=float(off))


# ---------------------------------------------------------------------------
# centre manifold


def _newton_minus(ss, p, z, y, guess, tol=1e-12, max_iter=50):
    xm = np.array(guess, dtype=float)
    for _ in range(max_iter):
        u = np.concatenate([xm, z], axis=-1)
        r = ss.f(u, y, 0.0)[..., :p]
        if np.all(np.linalg.norm(r, axis=-1) <= tol):
            return xm
        J = ss.dfdx(u, y, 0.0)[..., :p, :p]
        xm = xm - _solve(J, r[..., None])[..., 0]
        if not np.all(np.isfinite(xm)):
            break
    raise NoConvergence("Newton for the centre manifold did not converge")


def _centre_x(ss, p, z, y, eps, guess):
    """Leading-order root plus one correction sweep of the invariance PDE."""
    x0 = _newton_minus(ss, p, z, y, guess)
    u = np.concatenate([x0, z], axis=-1)
    J = ss.dfdx(u, y, 0.0)
    Jm = J[..., :p, :p]
    dz = -_solve(Jm, J[..., :p, p:])
    dy = -_solve(Jm, ss.dfdy(u, y, 0.0)[..., :p, :])
    rhs = (dz @ ss.f(u, y, eps)[..., p:, None]
           + eps * dy @ ss.g(u, y, eps)[..., None]
           - eps * ss.dfde(u, y, 0.0)[..., :p, None])
    return x0 + _solve(Jm, rhs)[..., 0], x0


def _centre_batch(split: SplitSystem, z, y, eps, rho, guess=None, derivatives=True):
    ss, p, q = split.system, split.p, split.q
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    P = z.shape[0]
    if p == 0:
        empty = np.zeros((P, 0))
        return {"xbar": empty, "x0": empty, "A": np.zeros((P, 0, 0)), "X": np.zeros((P, 0, 0)),
                "F0": np.zeros((P, 0, ss.k))}
    if guess is None:
        guess = np.zeros((P, p))
    xbar, x0 = _centre_x(ss, p, z, y, eps, guess)
    out = {"xbar": xbar, "x0": x0}
    if not derivatives:
        return out
    # derivatives of the corrected manifold by central differences
    dxz = np.empty((P, p, q))
    dxy = np.empty((P, p, ss.m))
    for arr, base, other, first in ((dxz, z, y, True), (dxy, y, z, False)):
        for j in range(base.shape[1]):
            h = DIFF_STEP * np.maximum(1.0, np.abs(base[:, j]))
            vals = []
            for sgn in (-1.0, 1.0):
                b = base.copy()
                b[:, j] += sgn * h
                zz, yy = (b, other) if first else (other, b)
                vals.append(_centre_x(ss, p, zz, yy, eps, x0)[0])
            arr[:, :, j] = (vals[1] - vals[0]) / (2.0 * h[:, None])
    u = np.concatenate([xbar, z], axis=-1)
    fx = ss.dfdx(u, y, eps)
    gx = ss.dgdx(u, y, eps)
    A = fx[..., :p, :p] - dxz @ fx[..., p:, :p] - eps * dxy @ gx[..., :, :p]
    Fu = np.asarray(ss.F(u, y, eps), dtype=float)
    G = np.asarray(ss.G(u, y, eps), dtype=float)
    F0 = Fu[..., :p, :] - dxz @ Fu[..., p:, :] - rho * np.sqrt(eps) * dxy @ G
    X = solve_lyapunov_batch(A, F0 @ np.swapaxes(F0, -1, -2))
    out.update({"A": A, "F0": F0, "X": X, "dxz": dxz, "dxy": dxy})
    return out


@dataclass
class CentreManifoldPoint:
    z: np.ndarray
    y: np.ndarray
    xbar_minus: np.ndarray
    x_minus_leading: np.ndarray
    A_minus: np.ndarray
    F0_minus: np.ndarray
    Xbar_minus: np.ndarray

    @property
    def lyapunov_residual(self):
        if self.A_minus.size == 0:
            return 0.0
        Q = self.F0_minus @ self.F0_minus.T
        A, X = self.A_minus, self.Xbar_minus
        return float(np.linalg.norm(A @ X + X @ A.T + Q) / max(np.linalg.norm(Q), 1e-300))


def centre_manifold_point(split: SplitSystem, z, y, eps, rho=0.0) -> CentreManifoldPoint:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if split.p and np.max(np.linalg.eigvals(split.A_minus).real) >= 0:
        raise SingularJacobian("stable block is not Hurwitz")
    d = _centre_batch(split, z[None], y[None], eps, rho)
    return CentreManifoldPoint(z=z, y=y, xbar_minus=d["xbar"][0], x_minus_leading=d["x0"][0],
                               A_minus=d["A"][0], F0_minus=d["F0"][0], Xbar_minus=d["X"][0])


# ---------------------------------------------------------------------------
# B^-(h) exits


def bminus_layer(split: SplitSystem, eps, rho):
    p = split.p

    def layer(u, y, guess):
        z = u[:, p:]
        inside = split.in_N(z, y)
        q = np.full(u.shape[0], -np.inf)
        out = None
        if np.any(inside):
            g = None if guess is None else guess[inside]
            d = _centre_batch(split, z[inside], y[inside], eps, rho, g)
            q[inside] = quadratic_form(u[inside, :p] - d["xbar"], d["X"])
            if np.all(inside):
                out = d["xbar"]
        return q, inside, out

    return layer


def bminus_exit_probability(split: SplitSystem, params: NoiseParams, h_grid, t_end, N, seed, z0, y0,
                            step=None, chunk=1000, workers=None) -> ExitCurve:
    """MC estimate of P(tau_{B^-(h)} < t and before (z, y) leaves N).

    Paths of the full split system start on the centre manifold.
    """
    if split.p == 0:
        raise ValueError("B^-(h) needs at least one stable fast direction")
    ss = split.system
    eps = params.eps
    h_grid = np.asarray(h_grid, dtype=float)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    u0 = np.concatenate([split.centre_manifold(z0[None], y0[None], eps)[0], z0])
    dt = eps / 20.0 if step is None else float(step)
    layer = bminus_layer(split, eps, params.rho)

    def job(start, stop):
        P = stop - start
        acc = ExitAccumulator(layer, h_grid, P)
        ub = np.broadcast_to(u0, (P, ss.n)).copy()
        yb = np.broadcast_to(y0, (P, ss.m)).copy()
        acc.start(ub, yb)
        noise = NoiseBlock(seed, np.arange(start, stop), ss.k, dt)
        simulate_full(ss, params, ub, yb, t_end, noise, dt, record_stride=0, on_block=acc)
        return acc.first

    first = np.concatenate(run_ensemble(job, N, chunk, workers), axis=1)
    return curve_from_first_indices(first, h_grid, N, t_end, dt, params.sigma, eps, seed)


# ---------------------------------------------------------------------------
# full versus reduced


@dataclass
class DeviationStats:
    """Quantiles of sup_{s <= t ^ tau} |(z_s, y_s) - (z0_s, y0_s)| at checkpoints."""

    times: np.ndarray
    quantiles: dict
    median: np.ndarray
    stopped_fraction: np.ndarray
    chi_C1: np.ndarray
    chi_C2: np.ndarray
    scale: np.ndarray
    sigma: float
    eps: float
    N: int


def tube_halfwidth(y, sigma, eps, c=3.0):
    return c * sigma / np.maximum(np.sqrt(np.abs(y)), eps**0.25)


def _tau_index(tau_spec, zr, yr, zdet, ydet, sigma, eps):
    """First recorded index where the reduced path leaves the tube (T+1 if never)."""
    P, R = zr.shape[0], zr.shape[1]
    kind = (tau_spec or {}).get("kind", "tube")
    if kind == "none":
        return np.full(P, R)
    if kind != "tube":
        raise ValueError(f"unknown stopping rule {kind!r}")
    width = tube_halfwidth(ydet[:, 0], sigma, eps, tau_spec.get("width", 3.0) if tau_spec else 3.0)
    out = np.linalg.norm(zr - zdet[None], axis=-1) > width[None]
    idx = kernels.first_crossing(out.astype(float), 0.5)
    return np.where(idx >= 0, idx, R)


def _bif_matrices(split, u, y, eps):
    """B and C of the reduced (z, y) linearisation at split-coordinate points."""
    ss, p = split.system, split.p
    fx = ss.dfdx(u, y, eps)
    fy = ss.dfdy(u, y, eps)
    gx = ss.dgdx(u, y, eps)
    gy = ss.dgdy(u, y, eps)
    B = np.concatenate([np.concatenate([fx[..., p:, p:], fy[..., p:, :]], axis=-1),
                        np.concatenate([eps * gx[..., :, p:], eps * gy], axis=-1)], axis=-2)
    C = np.concatenate([fx[..., p:, :p], eps * gx[..., :, :p]], axis=-2)
    return B, C


def _opnorm(M):
    if min(M.shape[-2:]) == 1:
        return np.sqrt(np.sum(M * M, axis=(-2, -1)))
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def chi_C_envelope(split, eps, times, u_paths, y_paths, valid, max_points=401):
    """chi_C^(1), chi_C^(2) from the empirical envelope
    theta_C(s, v) = max over sample paths of ||V_w(s, v) C(zeta_w(v))||,
    each path counted up to its stopping index ``valid``."""
    K, R = u_paths.shape[:2]
    stride = max(1, int(np.ceil((R - 1) / (max_points - 1))))
    while (R - 1) % stride:
        stride += 1
    B, C = _bif_matrices(split, u_paths, y_paths, eps)
    Bmid = 0.5 * (B[:, :-1] + B[:, 1:])
    P = np.stack([MatrixTrack(times, B[w], Bmid[w], 1.0 / eps).step_propagators() for w in range(K)])
    Rc = (R - 1) // stride + 1
    Pc = np.empty((K, Rc - 1) + P.shape[2:])
    for b in range(Rc - 1):
        M = P[:, b * stride]
        for j in range(b * stride + 1, (b + 1) * stride):
            M = P[:, j] @ M
        Pc[:, b] = M
    Cc = C[:, ::stride]
    tc = times[::stride]
    vc = np.asarray(valid) // stride
    N = np.zeros((Rc, Rc))
    W = Cc[:, :1].copy()
    N[0, 0] = np.max(np.where(vc > 0, _opnorm(W[:, 0]), 0.0))
    for i in range(1, Rc):
        W = np.einsum("kab,kjbc->kjac", Pc[:, i - 1], W)
        W = np.concatenate([W, Cc[:, i:i + 1]], axis=1)
        nr = _opnorm(W)
        nr = np.where((i < vc)[:, None], nr, 0.0)
        N[i, : i + 1] = nr.max(axis=0)
    c1, _ = kernels.chi_integrals(tc, N, 1.0, 1.0 / eps)
    c2, _ = kernels.chi_integrals(tc, N, 2.0, 1.0 / eps)
    return tc, c1, c2


def compare_full_reduced(split: SplitSystem, params: NoiseParams, t_end, N, seed, z0, y0, tau_spec=None,
                         checkpoints=None, step=None, chunk=500, workers=None, envelope_paths=32,
                         quantile_levels=(0.25, 0.5, 0.75, 0.9)) -> DeviationStats:
    """Pathwise-coupled full and reduced runs in split coordinates."""
    ss, p = split.system, split.p
    eps, sig = params.eps, params.sigma
    dt = eps / 20.0 if step is None else float(step)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    u0 = np.concatenate([split.centre_manifold(z0[None], y0[None], eps)[0], z0])
    det = simulate_reduced(ss, params.replace(sigma=0.0), y0, t_end, NoiseBlock(seed, [0], ss.k, dt),
                           mode="bifurcation", split=split, z0=z0, step=dt)
    zdet, ydet = det.x[0, :, p:], det.y[0]
    times = det.times
    checkpoints = times[-1:] if checkpoints is None else np.asarray(checkpoints, dtype=float)
    cidx = np.rint(checkpoints / dt).astype(int)

    def job(start, stop):
        idx = np.arange(start, stop)
        full = simulate_full(ss, params, u0, y0, t_end, NoiseBlock(seed, idx, ss.k, dt), dt)
        red = simulate_reduced(ss, params, y0, t_end, NoiseBlock(seed, idx, ss.k, dt), mode="bifurcation",
                               split=split, z0=z0, step=dt)
        tau = _tau_index(tau_spec, red.x[..., p:], red.y, zdet, ydet, sig, eps)
        dev = np.sqrt(np.sum((full.x[..., p:] - red.x[..., p:]) ** 2, axis=-1)
                      + np.sum((full.y - red.y) ** 2, axis=-1))
        dev = np.where(np.arange(dev.shape[1])[None] <= np.minimum(tau, dev.shape[1] - 1)[:, None], dev, 0.0)
        sup = np.maximum.accumulate(dev, axis=1)[:, cidx]
        keep = slice(0, max(0, min(stop, envelope_paths) - start))
        return sup, tau, red.x[keep], red.y[keep]

    parts = run_ensemble(job, N, chunk, workers)
    sup = np.concatenate([r[0] for r in parts])
    tau = np.concatenate([r[1] for r in parts])
    env_u = np.concatenate([r[2] for r in parts])
    env_y = np.concatenate([r[3] for r in parts])
    quant = {lv: np.quantile(sup, lv, axis=0) for lv in quantile_levels}
    stopped = np.array([np.mean(tau <= c) for c in cidx])
    tc, c1, c2 = chi_C_envelope(split, eps, times, env_u, env_y, tau[: len(env_u)])
    c1c = np.interp(checkpoints, tc, c1)
    c2c = np.interp(checkpoints, tc, c2)
    return DeviationStats(times=checkpoints, quantiles=quant, median=np.quantile(sup, 0.5, axis=0),
                          stopped_fraction=stopped, chi_C1=c1c, chi_C2=c2c,
                          scale=sig * np.sqrt(c2c) + sig**2 * c1c, sigma=sig, eps=eps, N=N)


# ---------------------------------------------------------------------------
# pitchfork scaling


@dataclass
class ScalingReport:
    eps: float
    t0: float
    delta: float
    horizon: float
    rows: list = field(default_factory=list)
    escape: dict = field(default_factory=dict)
    slope: float = np.nan
    intercept: float = np.nan
    r2: float = np.nan

    def width(self, t, sigma=None):
        for r in self.rows:
            if np.isclose(r["t"], t) and (sigma is None or np.isclose(r["sigma"], sigma)):
                return r["width_hat"]
        raise KeyError(t)

    def width_ratio(self, t_far, t_near, sigma=None):
        """width(t_near) / width(t_far); about sqrt(|t_far| / |t_near|) in theory."""
        return self.width(t_near, sigma) / self.width(t_far, sigma)


def predicted_width(t, sigma, eps):
    return sigma / np.maximum(np.sqrt(np.abs(t)), eps**0.25)


def pitchfork_experiment(params: NoiseParams, N, seed, t0=-0.5, times=(-0.25, -0.125, -0.0625, 0.0),
                         sigmas=None, delta=0.1, horizon=0.15, step=None, chunk=500,
                         workers=None) -> ScalingReport:
    """Reduced pitchfork eps dz = (t z - z^3) dt + sigma sqrt(eps) dW from z(t0) = 0.

    Widths std(z_t) are reported at ``times`` for ``params.sigma``; escape
    statistics (first t >= 0 with |z| > delta, inf if none before
    ``horizon``) for every sigma of the ladder, followed by the regression
    of median^2 on eps ln(1/sigma).
    """
    eps = params.eps
    ladder = [params.sigma] if sigmas is None else list(sigmas)
    bad = [s for s in ladder + [params.sigma] if s > np.sqrt(eps)]
    if bad:
        raise RegimeViolation(f"sigma = {bad[0]} exceeds sqrt(eps) = {np.sqrt(eps):.4g}")
    dt = eps / 20.0 if step is None else float(step)
    nsteps = int(round((horizon - t0) / dt))
    rec_idx = np.rint((np.asarray(times) - t0) / dt).astype(np.int64)
    rep = ScalingReport(eps=eps, t0=t0, delta=delta, horizon=t0 + nsteps * dt)

    def run(sig):
        def job(start, stop):
            noise = NoiseBlock(seed, np.arange(start, stop), 1, dt)
            dW = noise.draw(nsteps)[..., 0]
            return kernels.pitchfork_paths(np.zeros(stop - start), t0, dt, eps, sig, dW, rec_idx, delta)

        parts = run_ensemble(job, N, chunk, workers)
        zrec = np.concatenate([r[0] for r in parts])
        esc = np.concatenate([r[1] for r in parts])
        tesc = np.where(esc >= 0, t0 + esc * dt, np.inf)
        return zrec, tesc

    for sig in dict.fromkeys(ladder + [params.sigma]):
        zrec, tesc = run(sig)
        q25, med, q75 = np.quantile(tesc, [0.25, 0.5, 0.75], method="inverted_cdf")
        rep.escape[sig] = {"median": float(med), "q25": float(q25), "q75": float(q75),
                           "fraction": float(np.mean(np.isfinite(tesc)))}
        if sig == params.sigma:
            for i, t in enumerate(times):
                rep.rows.append({"sigma": sig, "eps": eps, "t": float(t),
                                 "width_hat": float(np.std(zrec[:, i])),
                                 "width_pred": float(predicted_width(t, sig, eps)),
                                 "escape_median": float(med), "escape_q25": float(q25),
                                 "escape_q75": float(q75)})
    if len(ladder) >= 2:
        xs = np.array([eps * np.log(1.0 / s) for s in ladder])
        ys = np.array([rep.escape[s]["median"] ** 2 for s in ladder])
        if np.all(np.isfinite(ys)):
            slope, icpt = np.polyfit(xs, ys, 1)
            resid = ys - (slope * xs + icpt)
            sst = np.sum((ys - ys.mean()) ** 2)
            rep.slope, rep.intercept = float(slope), float(icpt)
            rep.r2 = float(1.0 - np.sum(resid**2) / sst) if sst > 0 else np.nan
    return rep
