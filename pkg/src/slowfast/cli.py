"""Command line: ``slowfast <subcommand> --config <file> [--seed S] [--out DIR]``.

Each run writes its CSV tables plus ``manifest.json`` into one directory.
The manifest is written even when the experiment fails; it then carries an
error record and the process exits with the error's code (2 configuration,
3 numerical failure, 4 I/O).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import ConfigError, InsufficientData, SlowFastError
from .model import get_system

EXPERIMENTS = ("manifold", "metric", "flow", "simulate", "exit-prob", "pitchfork", "compare-reduced")
EXIT_IO = 4
DEFAULT_H_GRID = (3.0, 3.5, 4.0, 4.5, 5.0)
DEFAULT_SIGMAS = (1e-2, 3e-3, 1e-3)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    experiment: str
    system: str = "linear1d"
    params: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    N: int = 1000
    master_seed: int = 0
    output_dir: str = ""
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown field")
        if "experiment" not in d:
            raise ConfigError("experiment", "missing")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        try:
            get_system(self.system)
        except KeyError as exc:
            raise ConfigError("system", str(exc.args[0])) from None
        for name in ("params", "grids", "options"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(name, "must be an object")
        extra = set(self.params) - {"eps", "sigma", "rho"}
        if extra:
            raise ConfigError(f"params.{sorted(extra)[0]}", "unknown parameter")
        try:
            self.noise_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError("params", str(exc)) from None
        if not isinstance(self.N, int) or isinstance(self.N, bool) or self.N < 1:
            raise ConfigError("N", "must be a positive integer")
        if not isinstance(self.master_seed, int) or isinstance(self.master_seed, bool) \
                or not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be an integer in [0, 2^64)")
        t_end = self.grids.get("t_end")
        if t_end is not None and not (isinstance(t_end, (int, float)) and t_end > 0):
            raise ConfigError("grids.t_end", "must be positive")
        step = self.grids.get("step")
        if step is not None and not (isinstance(step, (int, float)) and step > 0):
            raise ConfigError("grids.step", "must be positive")
        h = self.grids.get("h_grid")
        if h is not None and (not isinstance(h, list) or not h or any(not isinstance(v, (int, float)) or v <= 0 for v in h)):
            raise ConfigError("grids.h_grid", "must be a non-empty list of positive numbers (units of sigma)")

    def catalog(self):
        return get_system(self.system)

    def noise_params(self):
        base = self.catalog().params
        return base.replace(**{k: float(v) for k, v in self.params.items()})


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(table, path):
    """Write ``(header, rows)`` as UTF-8 CSV; rows may be any iterable and
    are streamed.  Floats use 17 significant digits (exact round trip)."""
    header, rows = table
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        width = len(header)
        for row in rows:
            row = list(row)
            if len(row) != width:
                raise ValueError(f"row of length {len(row)} in a table with {width} columns")
            w.writerow([_fmt(v) for v in row])


def _names(prefix, shape):
    if len(shape) == 1:
        return [f"{prefix}{i}" for i in range(shape[0])]
    return [f"{prefix}{i}{j}" for i in range(shape[0]) for j in range(shape[1])]


# ---------------------------------------------------------------------------
# experiments


def _y_grid(cfg, entry):
    yg = cfg.grids.get("y_grid")
    if yg is None:
        lo, hi = entry.system.box.lower, entry.system.box.upper
        yg = np.linspace(lo, hi, 21)
        yg = yg[entry.system.in_domain(yg)]
    yg = np.asarray(yg, dtype=float)
    return yg.reshape(len(yg), -1) if yg.ndim == 1 else yg


def _y0(cfg, entry):
    return np.atleast_1d(np.asarray(cfg.options.get("y0", entry.y0), dtype=float))


def _t_end(cfg, default=1.0):
    return float(cfg.grids.get("t_end", default))


def _step(cfg, params, t_end):
    step = cfg.grids.get("step")
    if step is None:
        return params.eps / 20.0
    return float(step)


def run_manifold(cfg, out, ctx):
    from .manifold import invariance_residual, linearization

    entry = cfg.catalog()
    sys_, params = entry.system, cfg.noise_params()
    y = _y_grid(cfg, entry)
    res = invariance_residual(sys_, y, params.eps)
    header = (["y%d" % i for i in range(sys_.m)] + _names("x_star", (sys_.n,)) + _names("x1", (sys_.n,))
              + _names("xbar", (sys_.n,)) + ["max_re_eig", "stability_class", "invariance_residual"])

    def rows():
        guess = None
        for i, yi in enumerate(y):
            mp = linearization(sys_, yi, params.eps, params.rho, guess)
            guess = mp.x_star
            yield (list(yi) + list(mp.x_star) + list(mp.x1) + list(mp.x_star + params.eps * mp.x1)
                   + [mp.max_re, mp.stability_class, res[i]])

    emit_csv((header, rows()), out / "manifold.csv")
    return ["manifold.csv"]


def run_metric(cfg, out, ctx):
    from .lyap import metric_at

    entry = cfg.catalog()
    sys_, params = entry.system, cfg.noise_params()
    y = _y_grid(cfg, entry)
    n = sys_.n
    header = (["y%d" % i for i in range(sys_.m)] + _names("Xstar", (n, n)) + _names("Xbar", (n, n))
              + _names("Zbar", (n, sys_.m)) + ["cond", "min_eig", "controllable"])

    def rows():
        for yi in y:
            mt = metric_at(sys_, params, yi)
            yield (list(yi) + list(mt.X_star.ravel()) + list(mt.X_bar.ravel()) + list(mt.Z_bar.ravel())
                   + [mt.cond, mt.min_eig, mt.controllable])

    emit_csv((header, rows()), out / "metric.csv")
    return ["metric.csv"]


def run_flow(cfg, out, ctx):
    from .flow import chi_functions, covariance_evolution, integrate_reduced, propagator_norm_series
    from .lyap import metric_at

    entry = cfg.catalog()
    sys_, params = entry.system, cfg.noise_params()
    t_end = _t_end(cfg)
    y0 = _y0(cfg, entry)
    orbit = integrate_reduced(sys_, params, y0, t_end, cfg.grids.get("step"))
    nU = propagator_norm_series(orbit.fast_track())
    nV = propagator_norm_series(orbit.slow_track())
    chi = chi_functions(orbit, "slow")
    chi1 = np.interp(orbit.times, chi.times, chi.chi1)
    chi2 = np.interp(orbit.times, chi.times, chi.chi2)
    mt = metric_at(sys_, params, y0)
    cov = covariance_evolution(orbit, params, mt.X_bar, mt.Z_bar, np.zeros((sys_.m, sys_.m)))
    n, m = sys_.n, sys_.m
    header = (["t"] + ["ydet%d" % i for i in range(m)] + ["norm_U", "norm_V", "chi1", "chi2"]
              + _names("X", (n, n)) + _names("Y", (m, m)))

    def rows():
        for k, t in enumerate(orbit.times):
            yield ([t] + list(orbit.y_det[k]) + [nU[k], nV[k], chi1[k], chi2[k]]
                   + list(cov.X[k].ravel()) + list(cov.Y[k].ravel()))

    emit_csv((header, rows()), out / "flow.csv")
    if orbit.exit_index is not None:
        ctx["warnings"].append(f"reduced orbit left the domain at grid index {orbit.exit_index}")
    return ["flow.csv"]


def run_simulate(cfg, out, ctx):
    from .flow import integrate_reduced
    from .lyap import MetricField
    from .sde import NoiseBlock, run_ensemble, simulate_full, simulate_linearized, simulate_reduced

    entry = cfg.catalog()
    sys_, params = entry.system, cfg.noise_params()
    t_end = _t_end(cfg)
    y0 = _y0(cfg, entry)
    variant = cfg.options.get("variant", "full")
    if variant not in ("full", "linearized", "reduced"):
        raise ConfigError("options.variant", f"unknown variant {variant!r}")
    dt = _step(cfg, params, t_end)
    nsteps = int(round(t_end / dt))
    stride = max(1, nsteps // int(cfg.options.get("samples", 200)))
    while nsteps % stride:
        stride -= 1
    seed, N = ctx["seed"], cfg.N
    orbit = None
    if variant == "linearized":
        orbit = integrate_reduced(sys_, params, y0, t_end, dt)
        if orbit.exit_index is not None:
            raise ConfigError("grids.t_end", "reduced orbit leaves the domain before t_end")
    x0 = MetricField(sys_, params).evaluate(y0[None])[0][0]

    def job(start, stop):
        idx = np.arange(start, stop)
        if variant == "full":
            rec = simulate_full(sys_, params, x0, y0, t_end, NoiseBlock(seed, idx, sys_.k, dt), dt, stride)
        elif variant == "reduced":
            rec = simulate_reduced(sys_, params, y0, t_end, NoiseBlock(seed, idx, sys_.k, dt), step=dt,
                                   record_stride=stride)
        else:
            rec = simulate_linearized(orbit, params, np.zeros(sys_.n), np.zeros(sys_.m),
                                      NoiseBlock(seed, idx, sys_.k, dt), stride)
        return np.concatenate([rec.x, rec.y], axis=-1), rec.times, rec.blowup_index

    parts = run_ensemble(job, N, workers=ctx["workers"])
    states = np.concatenate([p[0] for p in parts])
    times = parts[0][1]
    blow = np.concatenate([p[2] for p in parts])
    cols = ["x%d" % i for i in range(sys_.n)] + ["y%d" % i for i in range(sys_.m)]
    files = []
    for name, stat in (("mean", np.mean(states, axis=0)), ("std", np.std(states, axis=0)),
                       ("median", np.median(states, axis=0))):
        emit_csv((["t"] + cols, ([t] + list(stat[k]) for k, t in enumerate(times))), out / f"{name}.csv")
        files.append(f"{name}.csv")
    emit_csv((["path_index", "blowup_index"], ([i, b] for i, b in enumerate(blow))), out / "blowup.csv")
    files.append("blowup.csv")
    npaths = min(int(cfg.options.get("write_paths", 0)), 100, N)
    if npaths:
        emit_csv((["path_index", "t"] + cols,
                  ([p, t] + list(states[p, k]) for p in range(npaths) for k, t in enumerate(times))),
                 out / "paths.csv")
        files.append("paths.csv")
    return files


def run_exit_prob(cfg, out, ctx):
    from .exitlab import exit_probability, fit_exponent

    entry = cfg.catalog()
    sys_, params = entry.system, cfg.noise_params()
    t_end = _t_end(cfg)
    hs = np.asarray(cfg.grids.get("h_grid", DEFAULT_H_GRID), dtype=float)
    curve = exit_probability(sys_, params, hs * params.sigma, t_end, cfg.N, ctx["seed"], y0=_y0(cfg, entry),
                             step=cfg.grids.get("step"), workers=ctx["workers"])
    emit_csv((["h", "h_over_sigma", "p_hat", "ci_low", "ci_high", "n_exit", "N"],
              ([h, hs[i], curve.p_hat[i], curve.ci_low[i], curve.ci_high[i], curve.n_exit[i], curve.N]
               for i, h in enumerate(curve.h_grid))), out / "exit_curve.csv")
    try:
        fit = fit_exponent(curve)
        vals = [fit.kappa_hat, fit.kappa_lo, fit.kappa_hi, fit.r2]
    except InsufficientData as exc:
        ctx["warnings"].append(f"fit skipped: {exc}")
        vals = [float("nan")] * 4
    if np.any(curve.degenerate):
        ctx["warnings"].append(f"degenerate levels h/sigma = {hs[curve.degenerate].tolist()}")
    emit_csv((["kappa_hat", "kappa_lo", "kappa_hi", "r2", "sigma", "eps", "t_end", "seed"],
              [vals + [params.sigma, params.eps, t_end, ctx["seed"]]]), out / "fit.csv")
    ctx["notes"]["exit_detection"] = "grid-sampled; exit times biased late by at most one step"
    return ["exit_curve.csv", "fit.csv"]


def run_pitchfork(cfg, out, ctx):
    from .bif import pitchfork_experiment

    params = cfg.noise_params()
    o = cfg.options
    rep = pitchfork_experiment(params, cfg.N, ctx["seed"], t0=float(o.get("t0", -0.5)),
                               times=tuple(cfg.grids.get("times", (-0.25, -0.125, -0.0625, 0.0))),
                               sigmas=cfg.grids.get("sigmas", list(DEFAULT_SIGMAS)), delta=float(o.get("delta", 0.1)),
                               horizon=float(o.get("horizon", 0.15)), step=cfg.grids.get("step"),
                               workers=ctx["workers"])
    keys = ["sigma", "eps", "t", "width_hat", "width_pred", "escape_median", "escape_q25", "escape_q75"]
    emit_csv((keys, ([r[k] for k in keys] for r in rep.rows)), out / "scaling.csv")
    emit_csv((["sigma", "eps_log_inv_sigma", "escape_median", "escape_q25", "escape_q75", "escaped_fraction"],
              ([s, params.eps * np.log(1 / s), e["median"], e["q25"], e["q75"], e["fraction"]]
               for s, e in rep.escape.items())), out / "escape.csv")
    emit_csv((["slope", "intercept", "r2"], [[rep.slope, rep.intercept, rep.r2]]), out / "escape_fit.csv")
    return ["scaling.csv", "escape.csv", "escape_fit.csv"]


def run_compare_reduced(cfg, out, ctx):
    entry = cfg.catalog()
    params = cfg.noise_params()
    o = cfg.options
    bif_point = entry.facts.get("bifurcation_point")
    t_end = _t_end(cfg, 1.0 if bif_point is None else 0.3)
    if bif_point is not None and o.get("mode", "bifurcation") == "bifurcation":
        from .bif import compare_full_reduced, split_at_bifurcation

        split = split_at_bifurcation(entry.system, bif_point[0], bif_point[1], int(o.get("q", 1)),
                                     radius=float(o.get("radius", 0.5)))
        z0 = o.get("z0", [0.0] * split.q)
        cps = cfg.grids.get("checkpoints", [t_end])
        st = compare_full_reduced(split, params, t_end, cfg.N, ctx["seed"], z0, _y0(cfg, entry),
                                  tau_spec=o.get("tau"), checkpoints=cps, step=cfg.grids.get("step"),
                                  workers=ctx["workers"])
        levels = sorted(st.quantiles)
        header = ["t"] + ["q%02d" % round(100 * lv) for lv in levels] + ["stopped_fraction", "chi_C1",
                                                                          "chi_C2", "scale"]
        emit_csv((header, ([t] + [st.quantiles[lv][i] for lv in levels]
                           + [st.stopped_fraction[i], st.chi_C1[i], st.chi_C2[i], st.scale[i]]
                           for i, t in enumerate(st.times))), out / "deviation.csv")
        return ["deviation.csv"]
    from .sde import reduced_deviation

    dev = reduced_deviation(entry.system, params, _y0(cfg, entry), t_end, cfg.N, ctx["seed"],
                            step=cfg.grids.get("step"), workers=ctx["workers"])
    q = np.quantile(dev, [0.25, 0.5, 0.75, 0.9])
    emit_csv((["t", "q25", "q50", "q75", "q90", "sigma", "eps"],
              [[t_end] + list(q) + [params.sigma, params.eps]]), out / "deviation.csv")
    return ["deviation.csv"]


RUNNERS = {
    "manifold": run_manifold,
    "metric": run_metric,
    "flow": run_flow,
    "simulate": run_simulate,
    "exit-prob": run_exit_prob,
    "pitchfork": run_pitchfork,
    "compare-reduced": run_compare_reduced,
}


@dataclass
class ArtifactManifest:
    status: str
    experiment: str
    config: dict
    seed: int
    version: str
    backend: str
    workers: int
    wall_time: float
    started: str
    files: list
    warnings: list
    notes: dict
    error: dict = None
    path: str = ""


def _write_manifest(out, man):
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(man), fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, seed=None, workers=None) -> ArtifactManifest:
    """Run one experiment; the manifest is written whatever happens.

    Errors propagate after the manifest (with an error record) is on disk.
    """
    from .sde import worker_count

    seed = cfg.master_seed if seed is None else int(seed)
    out = Path(out_dir or cfg.output_dir or os.path.join("runs", cfg.experiment))
    out.mkdir(parents=True, exist_ok=True)
    ctx = {"seed": seed, "workers": worker_count(workers), "warnings": [], "notes": {}}
    t0 = time.perf_counter()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    man = ArtifactManifest(status="running", experiment=cfg.experiment, config=cfg.to_dict(), seed=seed,
                           version=__version__, backend=kernels.BACKEND, workers=ctx["workers"],
                           wall_time=0.0, started=started, files=[], warnings=ctx["warnings"],
                           notes=ctx["notes"], path=str(out))
    try:
        man.files = RUNNERS[cfg.experiment](cfg, out, ctx)
        man.status = "ok"
    except BaseException as exc:
        code = getattr(exc, "exit_code", EXIT_IO if isinstance(exc, OSError) else 3)
        man.status = "error"
        man.error = {"type": type(exc).__name__, "message": str(exc), "exit_code": code,
                     "context": f"experiment {cfg.experiment!r} on system {cfg.system!r}",
                     "traceback": traceback.format_exc(limit=5)}
        raise
    finally:
        man.wall_time = time.perf_counter() - t0
        _write_manifest(out, man)
    return man


def main(argv=None):
    ap = argparse.ArgumentParser(prog="slowfast", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides config and SLOWFAST_SEED)")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--workers", type=int, default=None, help="worker threads (default SLOWFAST_WORKERS or 1)")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.subcommand:
            raise ConfigError("experiment", f"config is for {cfg.experiment!r}, not {args.subcommand!r}")
        seed = args.seed
        if seed is None and os.environ.get("SLOWFAST_SEED"):
            try:
                seed = int(os.environ["SLOWFAST_SEED"])
            except ValueError:
                raise ConfigError("SLOWFAST_SEED", "must be an integer") from None
        man = run_experiment(cfg, args.out, seed, args.workers)
    except ConfigError as exc:
        print(f"slowfast: configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SlowFastError as exc:
        print(f"slowfast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"slowfast: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({"status": man.status, "out": man.path, "files": man.files}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
