"""Stochastic integrators sharing one noise convention.

Every path owns a counter-based Philox stream keyed by ``(master_seed,
path_index)``; increments are drawn step by step in C order, so a path's
noise does not depend on how paths are grouped into chunks, how many
workers run them, or how the time axis is split into blocks.  The full,
linearised and reduced integrators all consume the same k-channel
increments, which couples them pathwise.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import GridMismatch
from .flow import OrbitTable
from .manifold import adiabatic_batch
from .model import NoiseParams, SlowFastSystem

BLOWUP = 1e6
TIME_BLOCK = 256
DEFAULT_CHUNK = 1000
MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseStream:
    """Standard normal increments for one path."""

    master_seed: int
    path_index: int

    def generator(self):
        key = (int(self.master_seed) & MASK64) | (int(self.path_index) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def increments(self, nsteps, k, dt):
        return np.sqrt(dt) * self.generator().standard_normal((nsteps, k))


class NoiseBlock:
    """Increments for the paths ``indices`` drawn in successive time blocks."""

    def __init__(self, master_seed, indices, k, dt):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.k = int(k)
        self.dt = float(dt)
        self._gens = [NoiseStream(master_seed, int(i)).generator() for i in self.indices]
        self._sq = np.sqrt(self.dt)

    @classmethod
    def of(cls, stream, k, dt):
        if isinstance(stream, NoiseBlock):
            return stream
        if isinstance(stream, NoiseStream):
            return cls(stream.master_seed, [stream.path_index], k, dt)
        seed, indices = stream
        return cls(seed, indices, k, dt)

    def __len__(self):
        return len(self.indices)

    def draw(self, nsteps):
        out = np.empty((len(self._gens), nsteps, self.k))
        for p, gen in enumerate(self._gens):
            out[p] = gen.standard_normal((nsteps, self.k))
        return self._sq * out


def brownian_refine_increments(fine, factor):
    """Sum consecutive fine increments into coarse ones (same Brownian path)."""
    P, T, k = fine.shape
    if T % factor:
        raise GridMismatch("refinement factor does not divide the number of steps")
    return fine.reshape(P, T // factor, factor, k).sum(axis=2)


# ---------------------------------------------------------------------------
# records


@dataclass
class PathRecord:
    """Recorded samples of a batch of paths.

    ``x`` has shape (P, R, n) and ``y`` (P, R, m).  For ``variant ==
    "linearized"`` they hold the deviations xi, eta from the deterministic
    orbit.  ``blowup_index`` is the first step with a state norm above 1e6
    (-1 if none); later samples repeat the frozen state.
    """

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    variant: str
    path_index: np.ndarray
    blowup_index: np.ndarray
    diagnostics: dict = field(default_factory=dict)


BlockHook = Callable[[int, np.ndarray, np.ndarray], None]


def _nsteps(t_end, dt):
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise GridMismatch(f"step {dt} does not divide t_end = {t_end}")
    return n


def _drive(step, x0, y0, noise: NoiseBlock, nsteps, stride, on_block: Optional[BlockHook], block=TIME_BLOCK):
    """Run ``step(j, x, y, dW) -> (x, y)`` with blow-up freezing.

    ``on_block(j0, xs, ys)`` receives the states after steps j0+1 .. j0+b.
    Returns (recorded x, recorded y, blowup_index).
    """
    if stride and nsteps % stride:
        raise GridMismatch("record stride must divide the number of steps")
    x, y = np.array(x0, dtype=float), np.array(y0, dtype=float)
    P = x.shape[0]
    alive = np.ones(P, dtype=bool)
    blow = np.full(P, -1, dtype=np.int64)
    rec_x, rec_y = ([x.copy()], [y.copy()]) if stride else (None, None)
    j = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while j < nsteps:
            b = min(block, nsteps - j)
            dW = noise.draw(b)
            xs = np.empty((P, b) + x.shape[1:])
            ys = np.empty((P, b) + y.shape[1:])
            for i in range(b):
                xn, yn = step(j + i, x, y, dW[:, i])
                norm = np.sqrt(np.sum(xn * xn, axis=-1) + np.sum(yn * yn, axis=-1))
                bad = alive & ~(norm <= BLOWUP)
                blow[bad] = j + i + 1
                alive &= ~bad
                x = np.where(alive[:, None], xn, x)
                y = np.where(alive[:, None], yn, y)
                xs[:, i], ys[:, i] = x, y
                if stride and (j + i + 1) % stride == 0:
                    rec_x.append(x.copy())
                    rec_y.append(y.copy())
            if on_block is not None:
                on_block(j, xs, ys)
            j += b
    if stride:
        return np.stack(rec_x, axis=1), np.stack(rec_y, axis=1), blow
    return None, None, blow


def _batch(a, P, dim):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return np.broadcast_to(a, (P, dim)).copy() if a.ndim == 1 else a.reshape(P, dim)


def _times(nsteps, dt, stride, t0=0.0):
    if not stride:
        return np.array([t0])
    return t0 + dt * np.arange(0, nsteps + 1, stride)


# ---------------------------------------------------------------------------
# integrators


def simulate_full(sys: SlowFastSystem, params: NoiseParams, x0, y0, t_end, stream, step=None,
                  record_stride=1, on_block=None) -> PathRecord:
    """Euler-Maruyama for the full system with one shared increment per step."""
    eps, sig, rho = params.eps, params.sigma, params.rho
    dt = eps / 20.0 if step is None else float(step)
    nsteps = _nsteps(t_end, dt)
    noise = NoiseBlock.of(stream, sys.k, dt)
    P = len(noise)
    a, b, c = dt / eps, sig / np.sqrt(eps), rho * sig

    def em(j, x, y, dW):
        xn = x + sys.f(x, y, eps) * a + b * (sys.F(x, y, eps) @ dW[..., None])[..., 0]
        yn = y + sys.g(x, y, eps) * dt + c * (sys.G(x, y, eps) @ dW[..., None])[..., 0]
        return xn, yn

    xr, yr, blow = _drive(em, _batch(x0, P, sys.n), _batch(y0, P, sys.m), noise, nsteps, record_stride, on_block)
    return PathRecord(_times(nsteps, dt, record_stride), xr, yr, "full", noise.indices, blow)


def linear_step_operators(orbit: OrbitTable, params: NoiseParams):
    """(P_j, Q_j) with z_{j+1} = P_j z_j + Q_j dW_j for z = (xi, eta).

    ``P_j`` is the Magnus propagator of the joint drift over the interval and
    the noise is injected at the interval midpoint, propagated over the
    second half-interval.
    """
    eps, sig, rho = orbit.eps, params.sigma, params.rho
    track = orbit.joint_track()
    Pj = track.step_propagators()
    Ph = track.half_propagators()
    Fj = np.concatenate([orbit.F0_mid / np.sqrt(eps), rho * orbit.G0_mid], axis=-2)
    return Pj, sig * Ph @ Fj


def simulate_linearized(orbit: OrbitTable, params: NoiseParams, xi0, eta0, stream, record_stride=1,
                        on_block=None) -> PathRecord:
    """Linear SDE for (xi, eta) with coefficients frozen along the orbit."""
    dt = orbit.step
    nsteps = len(orbit.times) - 1
    n, m = orbit.n, orbit.m
    k = orbit.F0.shape[-1]
    noise = NoiseBlock.of(stream, k, dt)
    P = len(noise)
    if record_stride and nsteps % record_stride:
        raise GridMismatch("record stride must divide the number of steps")
    Pj, Qj = linear_step_operators(orbit, params)
    z = np.concatenate([_batch(xi0, P, n), _batch(eta0, P, m)], axis=-1)
    recs = [z[:, None]] if record_stride else []
    j = 0
    while j < nsteps:
        b = min(TIME_BLOCK, nsteps - j)
        if record_stride and b % record_stride:
            b = max(record_stride, b - b % record_stride)
        dW = noise.draw(b)
        zs = kernels.propagate_linear(Pj[j:j + b], Qj[j:j + b], z, dW, 1)
        if on_block is not None:
            on_block(j, zs[:, 1:, :n], zs[:, 1:, n:])
        if record_stride:
            idx = np.arange(1, b + 1)
            keep = ((j + idx) % record_stride) == 0
            recs.append(zs[:, idx[keep]])
        z = zs[:, -1]
        j += b
    zr = np.concatenate(recs, axis=1) if record_stride else z[:, None]
    return PathRecord(orbit.times[::record_stride] if record_stride else orbit.times[-1:],
                      zr[..., :n], zr[..., n:], "linearized", noise.indices, np.full(P, -1, dtype=np.int64))


def simulate_reduced(sys: SlowFastSystem, params: NoiseParams, y0, t_end, stream, mode="stable",
                     split=None, z0=None, step=None, record_stride=1, on_block=None) -> PathRecord:
    """Reduced SDE with the fast variables pinned to their invariant manifold.

    ``mode="stable"``: slow variables only, x = xbar(y, eps).  Recorded
    ``x`` holds the pinned value.

    ``mode="bifurcation"``: ``split`` (a :class:`slowfast.bif.SplitSystem`)
    supplies the centre manifold; the state is (z, y) with
    x^- = xbar^-(z, y, eps).  Recorded ``x`` holds (x^-, z) in split
    coordinates.
    """
    eps, sig, rho = params.eps, params.sigma, params.rho
    dt = eps / 20.0 if step is None else float(step)
    nsteps = _nsteps(t_end, dt)
    k = sys.k if split is None else split.system.k
    noise = NoiseBlock.of(stream, k, dt)
    P = len(noise)
    c = rho * sig
    if mode == "stable":
        state = {"guess": None}

        def pinned(y):
            xb, xs = adiabatic_batch(sys, y, eps, state["guess"])
            state["guess"] = xs
            return xb

        def em(j, x, y, dW):
            xb = pinned(y)
            yn = y + sys.g(xb, y, eps) * dt + c * (sys.G(xb, y, eps) @ dW[..., None])[..., 0]
            return pinned(yn), yn

        y_start = _batch(y0, P, sys.m)
        xr, yr, blow = _drive(em, pinned(y_start), y_start, noise, nsteps, record_stride, on_block)
        return PathRecord(_times(nsteps, dt, record_stride), xr, yr, "reduced", noise.indices, blow)
    if mode != "bifurcation":
        raise ValueError(f"unknown mode {mode!r}")
    if split is None:
        raise ValueError("bifurcation mode needs a SplitSystem")
    ss = split.system
    q, p = split.q, ss.n - split.q
    a, b = dt / eps, sig / np.sqrt(eps)
    zstart = _batch(z0, P, q)
    ystart = _batch(y0, P, ss.m)
    cache = {"guess": None}

    def full_state(z, y):
        xm = split.centre_manifold(z, y, eps, cache["guess"])
        cache["guess"] = xm
        return np.concatenate([xm, z], axis=-1)

    def em(j, x, y, dW):
        u = full_state(x[..., p:], y)
        zn = x[..., p:] + ss.f(u, y, eps)[..., p:] * a + b * (ss.F(u, y, eps)[..., p:, :] @ dW[..., None])[..., 0]
        yn = y + ss.g(u, y, eps) * dt + c * (ss.G(u, y, eps) @ dW[..., None])[..., 0]
        return full_state(zn, yn), yn

    xr, yr, blow = _drive(em, full_state(zstart, ystart), ystart, noise, nsteps, record_stride, on_block)
    return PathRecord(_times(nsteps, dt, record_stride), xr, yr, "reduced", noise.indices, blow)


# ---------------------------------------------------------------------------
# ensembles


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("SLOWFAST_WORKERS", "1")))


def run_ensemble(job, N, chunk=DEFAULT_CHUNK, workers=None):
    """Run ``job(start, stop)`` over fixed path chunks; results in chunk order.

    Chunk boundaries depend only on ``N`` and ``chunk``, never on the number
    of workers, so per-path arithmetic is identical for any worker count.
    """
    bounds = [(s, min(s + chunk, N)) for s in range(0, N, chunk)]
    w = worker_count(workers)
    if w == 1 or len(bounds) == 1:
        return [job(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(lambda be: job(*be), bounds))


def deterministic_path(sys, params, x0, y0, t_end, step=None):
    """sigma = 0 path from the same integrator (used for spreading statistics)."""
    return simulate_full(sys, params.replace(sigma=0.0), x0, y0, t_end, NoiseStream(0, 0), step)


def reduced_deviation(sys: SlowFastSystem, params: NoiseParams, y0, t_end, N, seed, step=None,
                      chunk=DEFAULT_CHUNK, workers=None):
    """Per-path sup_{s <= t_end} |y_s - y0_s| between coupled full and reduced runs.

    The full run starts on the adiabatic manifold; both consume the same
    increments (path ``i`` uses stream ``(seed, i)``).
    """
    eps = params.eps
    dt = eps / 20.0 if step is None else float(step)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    x0 = adiabatic_batch(sys, y0[None], eps)[0][0]

    def job(start, stop):
        idx = np.arange(start, stop)
        full = simulate_full(sys, params, x0, y0, t_end, NoiseBlock(seed, idx, sys.k, dt), dt)
        red = simulate_reduced(sys, params, y0, t_end, NoiseBlock(seed, idx, sys.k, dt), step=dt)
        return np.max(np.linalg.norm(full.y - red.y, axis=-1), axis=1)

    return np.concatenate(run_ensemble(job, N, chunk, workers))
