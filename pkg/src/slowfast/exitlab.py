"""Concentration layers B(h), first exits and exit-probability curves.

Exit detection is grid-sampled: an exit between two grid points that does
not show at either sample is missed, so exit times are biased late by at
most one step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .errors import DegenerateEstimate, GridMismatch, InsufficientData, NotControllable, OutsideDomain
from .lyap import MetricField
from .model import NoiseParams, SlowFastSystem
from .sde import NoiseBlock, PathRecord, run_ensemble, simulate_full

Z95 = 1.959963984540054
NEVER = np.inf


def quadratic_form(dx, X):
    """<dx, X^{-1} dx> through a Cholesky solve, batched over leading axes."""
    dx = np.asarray(dx, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[-1] == 1:
        if np.any(X[..., 0, 0] <= 0.0):
            raise NotControllable("metric is not positive definite")
        return dx[..., 0] ** 2 / X[..., 0, 0]
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        raise NotControllable("metric is not positive definite") from None
    w = np.linalg.solve(L, dx[..., None])[..., 0]
    return np.sum(w * w, axis=-1)


def layer_value(metric: MetricField, x, y, guess=None):
    """<x - xbar(y), Xbar(y)^{-1} (x - xbar(y))> for points (x, y) of a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if not np.all(metric.sys.in_domain(y)):
        raise OutsideDomain("slow point outside the domain")
    xb, Xb, xs = metric.evaluate(y, guess)
    return quadratic_form(x - xb, Xb), xs


def _path_layer_values(path: PathRecord, metric: MetricField):
    P, R, n = path.x.shape
    x = path.x.reshape(P * R, n)
    y = path.y.reshape(P * R, -1)
    inside = metric.sys.in_domain(y)
    q = np.full(P * R, np.nan)
    if np.any(inside):
        q[inside], _ = layer_value(metric, x[inside], y[inside])
    return q.reshape(P, R), inside.reshape(P, R)


def first_exit(path: PathRecord, metric: MetricField, h, times=None):
    """First grid times of exit from B(h) and from the domain, per path.

    Returns two arrays of times with ``inf`` where no exit happened.  Layer
    exits are only counted while the slow variable is inside the domain.
    """
    if times is not None and len(times) != path.x.shape[1]:
        raise GridMismatch("path and time grid differ in length")
    times = path.times if times is None else np.asarray(times, dtype=float)
    q, inside = _path_layer_values(path, metric)
    iD = kernels.first_crossing((~inside).astype(float), 0.5)
    qq = np.where(inside, q, -np.inf)
    iB = kernels.first_crossing(qq, h * h)
    tB = np.where(iB >= 0, times[np.maximum(iB, 0)], NEVER)
    tD = np.where(iD >= 0, times[np.maximum(iD, 0)], NEVER)
    tB = np.where(tB <= tD, tB, NEVER)
    return tB, tD


def wilson_interval(k, n, z=Z95):
    k = np.asarray(k, dtype=float)
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = np.where(k == 0, 0.0, np.clip(centre - half, 0.0, 1.0))
    hi = np.where(k == n, 1.0, np.clip(centre + half, 0.0, 1.0))
    return lo, hi


@dataclass
class ExitCurve:
    h_grid: np.ndarray
    t_end: float
    N: int
    n_exit: np.ndarray
    p_hat: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    sigma: float
    eps: float
    seed: int = 0
    kappa_hat: float = np.nan
    kappa_ci: tuple = (np.nan, np.nan)
    exit_times: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_counts(cls, h_grid, n_exit, N, t_end, sigma, eps, seed=0, exit_times=None):
        n_exit = np.asarray(n_exit, dtype=np.int64)
        lo, hi = wilson_interval(n_exit, N)
        return cls(np.asarray(h_grid, dtype=float), float(t_end), int(N), n_exit, n_exit / N, lo, hi,
                   float(sigma), float(eps), int(seed), exit_times=exit_times)

    @property
    def degenerate(self):
        """h values where every path or no path exited."""
        return (self.n_exit == 0) | (self.n_exit == self.N)

    def check_degenerate(self):
        if np.any(self.degenerate):
            bad = self.h_grid[self.degenerate]
            raise DegenerateEstimate(f"all-exit or no-exit at h = {bad.tolist()}")


def metric_layer(metric: MetricField):
    """Layer function ``(x, y, guess) -> (q, inside, guess)`` for B(h)."""

    def layer(x, y, guess):
        inside = metric.sys.in_domain(y)
        q = np.full(x.shape[0], -np.inf)
        out = None
        if np.any(inside):
            g = None if guess is None else guess[inside]
            q[inside], xs = layer_value(metric, x[inside], y[inside], g)
            if np.all(inside):
                out = xs
        return q, inside, out

    return layer


class ExitAccumulator:
    """Streams layer values per time block and keeps, for every level, the
    first step index with q >= h^2 before the first step outside the
    region (``domain_exit``)."""

    def __init__(self, layer, levels, P):
        self.layer = layer
        self.levels = np.asarray(levels, dtype=float) ** 2
        self.first = np.full((len(levels), P), -1, dtype=np.int64)
        self.domain_exit = np.full(P, -1, dtype=np.int64)
        self.guess = None

    def start(self, x0, y0):
        self(-1, x0[:, None], y0[:, None])

    def __call__(self, j0, xs, ys):
        P, b, n = xs.shape
        guess = None if self.guess is None else np.repeat(self.guess, b, axis=0)
        q, inside, g = self.layer(xs.reshape(P * b, n), ys.reshape(P * b, -1), guess)
        if g is not None:
            self.guess = g.reshape(P, b, -1)[:, -1]
        inside = inside.reshape(P, b)
        q = q.reshape(P, b)
        dexit = kernels.first_crossing((~inside).astype(float), 0.5)
        newd = (self.domain_exit < 0) & (dexit >= 0)
        self.domain_exit[newd] = j0 + 1 + dexit[newd]
        # ignore samples at or after a domain exit
        alive_until = np.where(self.domain_exit >= 0, self.domain_exit - (j0 + 1), b)
        q = np.where(np.arange(b)[None, :] < alive_until[:, None], q, -np.inf)
        for li, lev in enumerate(self.levels):
            todo = self.first[li] < 0
            if not np.any(todo):
                continue
            idx = kernels.first_crossing(q, lev)
            hit = todo & (idx >= 0)
            self.first[li, hit] = j0 + 1 + idx[hit]


def curve_from_first_indices(first, h_grid, N, t_end, dt, sigma, eps, seed):
    exit_times = np.where(first >= 0, first * dt, np.inf)
    n_exit = np.sum(first >= 0, axis=1)
    return ExitCurve.from_counts(h_grid, n_exit, N, t_end, sigma, eps, seed, exit_times)


def exit_probability(sys: SlowFastSystem, params: NoiseParams, h_grid, t_end, N, seed, y0=None,
                     x0=None, step=None, chunk=1000, workers=None) -> ExitCurve:
    """Monte Carlo estimate of P(tau_B(h) < t_end and before leaving the domain).

    Paths start on the adiabatic manifold (unless ``x0`` is given) and are
    integrated with the full Euler-Maruyama scheme; path ``i`` uses the
    noise stream ``(seed, i)``.  Degenerate levels are kept in the curve
    and flagged by :attr:`ExitCurve.degenerate`.
    """
    h_grid = np.asarray(h_grid, dtype=float)
    if y0 is None:
        raise ValueError("exit_probability needs an initial slow point y0")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    metric = MetricField(sys, params)
    if x0 is None:
        x0 = metric.evaluate(y0[None])[0][0]
    dt = params.eps / 20.0 if step is None else float(step)

    def job(start, stop):
        P = stop - start
        acc = ExitAccumulator(metric_layer(metric), h_grid, P)
        xb = np.broadcast_to(x0, (P, sys.n)).copy()
        yb = np.broadcast_to(y0, (P, sys.m)).copy()
        acc.start(xb, yb)
        noise = NoiseBlock(seed, np.arange(start, stop), sys.k, dt)
        simulate_full(sys, params, xb, yb, t_end, noise, dt, record_stride=0, on_block=acc)
        return acc.first

    first = np.concatenate(run_ensemble(job, N, chunk, workers), axis=1)
    return curve_from_first_indices(first, h_grid, N, t_end, dt, params.sigma, params.eps, seed)


@dataclass
class ExponentFit:
    kappa_hat: float
    prefactor: float
    r2: float
    kappa_lo: float
    kappa_hi: float
    used: np.ndarray


def fit_exponent(curve: ExitCurve, p_min=1e-4, p_max=0.9) -> ExponentFit:
    """Weighted least squares of -sigma^2 ln p_hat against h^2.

    Weights are inverse variances of -sigma^2 ln p_hat propagated from the
    Wilson half-widths (unit weights when every half-width is zero, as for
    exact synthetic curves).  The slope is the exponent kappa, the intercept
    -sigma^2 ln(prefactor).
    """
    p = np.asarray(curve.p_hat, dtype=float)
    use = (p > p_min) & (p < p_max)
    if np.sum(use) < 4:
        raise InsufficientData(f"need >= 4 levels with p_hat in ({p_min}, {p_max}), have {int(np.sum(use))}")
    s2 = curve.sigma ** 2
    h2 = curve.h_grid[use] ** 2
    yv = -s2 * np.log(p[use])
    half = 0.5 * (np.asarray(curve.ci_high) - np.asarray(curve.ci_low))[use]
    sd = s2 * half / Z95 / p[use]
    w = 1.0 / sd**2 if np.all(sd > 0) else np.ones_like(h2)
    W = w / w.sum()
    xm, ym = np.sum(W * h2), np.sum(W * yv)
    sxx = np.sum(W * (h2 - xm) ** 2)
    slope = np.sum(W * (h2 - xm) * (yv - ym)) / sxx
    icpt = ym - slope * xm
    resid = yv - (icpt + slope * h2)
    sst = np.sum(W * (yv - ym) ** 2)
    r2 = 1.0 - np.sum(W * resid**2) / sst if sst > 0 else 1.0
    dof = len(h2) - 2
    s2res = np.sum(w * resid**2) / dof
    se = np.sqrt(s2res / (sxx * w.sum()))
    tq = stats.t.ppf(0.975, dof)
    curve.kappa_hat = float(slope)
    curve.kappa_ci = (float(slope - tq * se), float(slope + tq * se))
    return ExponentFit(float(slope), float(np.exp(-icpt / s2)), float(r2), curve.kappa_ci[0], curve.kappa_ci[1], use)


def reentry_fraction(sys: SlowFastSystem, params: NoiseParams, y0, q0, h, t_check, N, seed,
                     step=None, chunk=1000, workers=None):
    """Fraction of paths started on the layer boundary <.,Xbar^{-1}.> = q0
    that are inside B(h) at time ``t_check`` (grid-rounded up)."""
    metric = MetricField(sys, params)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    xb, Xb, _ = metric.evaluate(y0[None])
    # start along the leading eigenvector of Xbar at quadratic form q0
    w, V = np.linalg.eigh(Xb[0])
    x0 = xb[0] + np.sqrt(q0 * w[-1]) * V[:, -1]
    dt = params.eps / 20.0 if step is None else float(step)
    nsteps = int(np.ceil(t_check / dt - 1e-9))
    t_end = nsteps * dt

    def job(start, stop):
        noise = NoiseBlock(seed, np.arange(start, stop), sys.k, dt)
        rec = simulate_full(sys, params, x0, y0, t_end, noise, dt, record_stride=nsteps)
        q, _ = layer_value(metric, rec.x[:, -1], rec.y[:, -1])
        return q < h * h

    inside = np.concatenate(run_ensemble(job, N, chunk, workers))
    return float(np.mean(inside)), x0, t_end
