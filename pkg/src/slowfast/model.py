"""Slow-fast systems, noise parameters and the built-in benchmark catalog.

A system is the pair of SDEs

    dx = f(x, y, eps)/eps dt + sigma/sqrt(eps) F(x, y, eps) dW
    dy = g(x, y, eps) dt     + rho*sigma      G(x, y, eps) dW

driven by one k-dimensional Brownian motion W.  Field callables are
vectorised: they receive ``x`` of shape ``(..., n)`` and ``y`` of shape
``(..., m)`` and return arrays of shape ``(..., n)``, ``(..., m)``,
``(..., n, k)`` and ``(..., m, k)`` respectively.  Jacobian callables return
``(..., rows, cols)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EvaluationFailure, JacobianMismatch

Field = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

JACOBIAN_RTOL = 1e-5
EPS_DIFF_STEP = 1e-6


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))

    def contains(self, p):
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)


@dataclass(frozen=True)
class NoiseParams:
    eps: float
    sigma: float
    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not 0.0 <= self.rho <= 1e3:
            raise ValueError(f"rho must lie in [0, 1e3], got {self.rho}")

    @property
    def sigma_slow(self):
        return self.rho * self.sigma

    def replace(self, **kw):
        d = dict(eps=self.eps, sigma=self.sigma, rho=self.rho)
        d.update(kw)
        return NoiseParams(**d)


@dataclass(frozen=True)
class SlowFastSystem:
    """Immutable description of a slow-fast SDE.

    ``domain`` is the membership predicate of the slow region; ``box`` bounds
    it and is what probe generation samples from.  Missing Jacobians are
    replaced by central finite differences.
    """

    n: int
    m: int
    k: int
    f: Field
    g: Field
    F: Field
    G: Field
    box: Box
    domain: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jac_f_x: Optional[Field] = None
    jac_f_y: Optional[Field] = None
    jac_g_x: Optional[Field] = None
    jac_g_y: Optional[Field] = None
    name: str = "custom"
    x_box: Optional[Box] = None

    def __post_init__(self):
        for attr in ("n", "m", "k"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")

    def in_domain(self, y):
        y = np.asarray(y, dtype=float)
        inside = self.box.contains(y)
        if self.domain is not None:
            inside = inside & np.asarray(self.domain(y), dtype=bool)
        return inside

    # Jacobians: analytic when supplied, otherwise central differences.
    def dfdx(self, x, y, eps):
        if self.jac_f_x is not None:
            return np.asarray(self.jac_f_x(x, y, eps), dtype=float)
        return fd_jacobian(lambda xx: self.f(xx, y, eps), x, _scale(x, y))

    def dfdy(self, x, y, eps):
        if self.jac_f_y is not None:
            return np.asarray(self.jac_f_y(x, y, eps), dtype=float)
        return fd_jacobian(lambda yy: self.f(x, yy, eps), y, _scale(x, y))

    def dgdx(self, x, y, eps):
        if self.jac_g_x is not None:
            return np.asarray(self.jac_g_x(x, y, eps), dtype=float)
        return fd_jacobian(lambda xx: self.g(xx, y, eps), x, _scale(x, y))

    def dgdy(self, x, y, eps):
        if self.jac_g_y is not None:
            return np.asarray(self.jac_g_y(x, y, eps), dtype=float)
        return fd_jacobian(lambda yy: self.g(x, yy, eps), y, _scale(x, y))

    def dfde(self, x, y, eps=0.0):
        """Forward difference in eps (f is only defined for eps >= 0)."""
        return (self.f(x, y, eps + EPS_DIFF_STEP) - self.f(x, y, eps)) / EPS_DIFF_STEP


def _scale(x, y):
    pt = np.concatenate([np.asarray(x, float), np.asarray(y, float)], axis=-1)
    return np.linalg.norm(pt, axis=-1)


def fd_step(scale):
    return np.maximum(1e-6, 1e-6 * np.asarray(scale, dtype=float))


def fd_jacobian(fun, p, scale):
    """Central-difference Jacobian of ``fun`` at ``p`` (batched over leading axes)."""
    p = np.asarray(p, dtype=float)
    h = fd_step(scale)[..., None]
    cols = []
    for j in range(p.shape[-1]):
        e = np.zeros(p.shape[-1])
        e[j] = 1.0
        fp = np.asarray(fun(p + h * e), dtype=float)
        fm = np.asarray(fun(p - h * e), dtype=float)
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=-1)


@dataclass
class Issue:
    kind: str
    point: tuple
    detail: str


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def accepted(self):
        return not self.issues

    def raise_if_failed(self):
        for issue in self.issues:
            exc = EvaluationFailure if issue.kind == "EvaluationFailure" else JacobianMismatch
            raise exc(f"at (x, y) = {issue.point}: {issue.detail}")


def validate_system(sys: SlowFastSystem, probes, eps: float = 0.0) -> ValidationReport:
    """Probe field evaluations and cross-check analytic Jacobians.

    Each probe is an ``(x, y)`` pair.  A probe that fails to evaluate (raises,
    wrong shape, non-finite) is reported as ``EvaluationFailure``; an analytic
    Jacobian off by more than ``1e-5`` relative to central differences is a
    ``JacobianMismatch``.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("validate_system needs at least one probe")
    report = ValidationReport()
    shapes = {"f": (sys.n,), "g": (sys.m,), "F": (sys.n, sys.k), "G": (sys.m, sys.k)}
    for x, y in probes:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        pt = (tuple(x.tolist()), tuple(y.tolist()))
        if x.shape != (sys.n,) or y.shape != (sys.m,):
            report.issues.append(Issue("EvaluationFailure", pt, "probe has wrong dimension"))
            continue
        failed = False
        for name, shape in shapes.items():
            try:
                val = np.asarray(getattr(sys, name)(x, y, eps), dtype=float)
            except Exception as exc:  # user code may throw anything
                report.issues.append(Issue("EvaluationFailure", pt, f"{name} raised {exc!r}"))
                failed = True
                continue
            if val.shape != shape:
                report.issues.append(
                    Issue("EvaluationFailure", pt, f"{name} has shape {val.shape}, expected {shape}")
                )
                failed = True
            elif not np.all(np.isfinite(val)):
                report.issues.append(Issue("EvaluationFailure", pt, f"{name} is not finite"))
                failed = True
        if failed:
            continue
        scale = _scale(x, y)
        checks = [
            ("jac_f_x", lambda xx: sys.f(xx, y, eps), x),
            ("jac_f_y", lambda yy: sys.f(x, yy, eps), y),
            ("jac_g_x", lambda xx: sys.g(xx, y, eps), x),
            ("jac_g_y", lambda yy: sys.g(x, yy, eps), y),
        ]
        for name, fun, p in checks:
            analytic = getattr(sys, name)
            if analytic is None:
                continue
            try:
                ja = np.asarray(analytic(x, y, eps), dtype=float)
            except Exception as exc:
                report.issues.append(Issue("EvaluationFailure", pt, f"{name} raised {exc!r}"))
                continue
            jfd = fd_jacobian(fun, p, scale)
            if ja.shape != jfd.shape or not np.all(np.isfinite(ja)):
                report.issues.append(Issue("EvaluationFailure", pt, f"{name} has bad shape or values"))
                continue
            err = np.max(np.abs(ja - jfd))
            ref = max(np.max(np.abs(jfd)), 1.0)
            if err > JACOBIAN_RTOL * ref:
                report.issues.append(
                    Issue("JacobianMismatch", pt, f"{name} differs from finite differences by {err:.3e}")
                )
    return report


def probe_points(sys: SlowFastSystem, count=16, seed=0):
    """Random probes: y uniform in the domain box (rejecting points outside
    the predicate), x uniform in ``x_box`` or ``[-1, 1]^n``."""
    rng = np.random.default_rng(seed)
    xb = sys.x_box or Box(-np.ones(sys.n), np.ones(sys.n))
    out = []
    for _ in range(100 * count):
        y = rng.uniform(sys.box.lower, sys.box.upper)
        if not sys.in_domain(y):
            continue
        out.append((rng.uniform(xb.lower, xb.upper), y))
        if len(out) == count:
            break
    return out


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class CatalogEntry:
    system: SlowFastSystem
    params: NoiseParams
    y0: np.ndarray
    facts: dict



def _const(mat):
    mat = np.asarray(mat, dtype=float)

    def fun(x, y, eps):
        lead = np.asarray(x).shape[:-1]
        return np.broadcast_to(mat, lead + mat.shape).copy()

    return fun


def _linear1d():
    sys = SlowFastSystem(
        n=1, m=1, k=1,
        f=lambda x, y, e: -x + y,
        g=lambda x, y, e: -y + 0.0 * x,
        F=_const([[1.0]]),
        G=_const([[1.0]]),
        jac_f_x=_const([[-1.0]]),
        jac_f_y=_const([[1.0]]),
        jac_g_x=_const([[0.0]]),
        jac_g_y=_const([[-1.0]]),
        box=Box([-5.0], [5.0]),
        name="linear1d",
    )
    facts = {
        "x_star": lambda y: np.asarray(y, float),
        "A_star": lambda y: np.array([[-1.0]]),
        "X_star": lambda y: np.array([[0.5]]),
        "xbar_exact": lambda y, eps: np.asarray(y, float) / (1.0 - eps),
        "reduced_drift": lambda y: -np.asarray(y, float),
    }
    return CatalogEntry(sys, NoiseParams(eps=0.01, sigma=0.03, rho=0.0), np.array([1.0]), facts)


_LIN2D_A = np.diag([-1.0, -2.0])


def _linear2d():
    sys = SlowFastSystem(
        n=2, m=1, k=2,
        f=lambda x, y, e: (x - y) @ _LIN2D_A.T,
        g=lambda x, y, e: -y + 0.0 * x[..., :1],
        F=_const(np.eye(2)),
        G=_const([[0.5, 0.5]]),
        jac_f_x=_const(_LIN2D_A),
        jac_f_y=_const(-_LIN2D_A @ np.ones((2, 1))),
        jac_g_x=_const(np.zeros((1, 2))),
        jac_g_y=_const([[-1.0]]),
        box=Box([-5.0], [5.0]),
        name="linear2d",
    )
    facts = {
        "x_star": lambda y: np.repeat(np.asarray(y, float), 2, axis=-1),
        "A_star": lambda y: _LIN2D_A.copy(),
        "X_star": lambda y: np.diag([0.5, 0.25]),
        "reduced_drift": lambda y: -np.asarray(y, float),
    }
    return CatalogEntry(sys, NoiseParams(eps=0.01, sigma=0.03, rho=0.0), np.array([1.0]), facts)


def cubic_root(y):
    """Real root of x**3 + x - y = 0 (Cardano; the cubic is monotone)."""
    y = np.asarray(y, dtype=float)
    d = np.sqrt(y * y / 4.0 + 1.0 / 27.0)
    return np.cbrt(y / 2.0 + d) + np.cbrt(y / 2.0 - d)


def _cubic():
    sys = SlowFastSystem(
        n=1, m=1, k=1,
        f=lambda x, y, e: -x**3 - x + y,
        g=lambda x, y, e: -y + 0.0 * x,
        F=_const([[1.0]]),
        G=_const([[1.0]]),
        jac_f_x=lambda x, y, e: (-3.0 * x**2 - 1.0)[..., None],
        jac_f_y=_const([[1.0]]),
        jac_g_x=_const([[0.0]]),
        jac_g_y=_const([[-1.0]]),
        box=Box([-3.0], [3.0]),
        name="cubic",
    )
    facts = {
        "x_star": cubic_root,
        "A_star": lambda y: np.atleast_2d(-3.0 * cubic_root(y) ** 2 - 1.0),
    }
    return CatalogEntry(sys, NoiseParams(eps=0.01, sigma=0.03, rho=0.0), np.array([1.0]), facts)


def _coupled1d():
    sys = SlowFastSystem(
        n=1, m=1, k=1,
        f=lambda x, y, e: -x + y,
        g=lambda x, y, e: x - 2.0 * y,
        F=_const([[1.0]]),
        G=_const([[1.0]]),
        jac_f_x=_const([[-1.0]]),
        jac_f_y=_const([[1.0]]),
        jac_g_x=_const([[1.0]]),
        jac_g_y=_const([[-2.0]]),
        box=Box([-5.0], [5.0]),
        name="coupled1d",
    )
    facts = {
        "x_star": lambda y: np.asarray(y, float),
        "A_star": lambda y: np.array([[-1.0]]),
        "X_star": lambda y: np.array([[0.5]]),
        # x = c y is invariant when eps c^2 + (1 - 2 eps) c - 1 = 0
        "xbar_exact": lambda y, eps: np.asarray(y, float)
        * ((-(1 - 2 * eps) + np.sqrt((1 - 2 * eps) ** 2 + 4 * eps)) / (2 * eps)),
        "reduced_drift": lambda y: -np.asarray(y, float),
    }
    return CatalogEntry(sys, NoiseParams(eps=0.01, sigma=0.05, rho=0.5), np.array([1.0]), facts)


def _pitchfork():
    sys = SlowFastSystem(
        n=1, m=1, k=1,
        f=lambda z, y, e: y * z - z**3,
        g=lambda z, y, e: np.ones_like(y) + 0.0 * z,
        F=_const([[1.0]]),
        G=_const([[0.0]]),
        jac_f_x=lambda z, y, e: (y - 3.0 * z**2)[..., None],
        jac_f_y=lambda z, y, e: z[..., None],
        jac_g_x=_const([[0.0]]),
        jac_g_y=_const([[0.0]]),
        box=Box([-2.0], [0.0]),
        domain=lambda y: np.asarray(y)[..., 0] < 0.0,
        name="pitchfork",
    )
    facts = {
        "x_star": lambda y: np.zeros_like(np.asarray(y, float)),
        "A_star": lambda y: np.atleast_2d(np.asarray(y, float)),
        "reduced_drift": lambda z, y: y * z - z**3,
        "bifurcation_point": (np.zeros(1), np.zeros(1)),
    }
    return CatalogEntry(sys, NoiseParams(eps=1e-3, sigma=1e-3, rho=0.0), np.array([-0.5]), facts)


def _pitchfork_aug(coupled):
    # state (x_minus, z); coupled variant feeds x_minus back into the z equation
    if coupled:
        def f(x, y, e):
            xm, z = x[..., 0], x[..., 1]
            return np.stack([-xm + z**2, y[..., 0] * z - xm * z], axis=-1)

        def jfx(x, y, e):
            xm, z = x[..., 0], x[..., 1]
            return np.stack([
                np.stack([-np.ones_like(xm), 2.0 * z], axis=-1),
                np.stack([-z, y[..., 0] - xm], axis=-1),
            ], axis=-2)
    else:
        def f(x, y, e):
            xm, z = x[..., 0], x[..., 1]
            return np.stack([-xm + z**2, y[..., 0] * z - z**3], axis=-1)

        def jfx(x, y, e):
            xm, z = x[..., 0], x[..., 1]
            return np.stack([
                np.stack([-np.ones_like(xm), 2.0 * z], axis=-1),
                np.stack([np.zeros_like(z), y[..., 0] - 3.0 * z**2], axis=-1),
            ], axis=-2)

    def jfy(x, y, e):
        z = x[..., 1]
        return np.stack([np.zeros_like(z), z], axis=-1)[..., None]

    name = "pitchfork_coupled" if coupled else "pitchfork_aug"
    sys = SlowFastSystem(
        n=2, m=1, k=2,
        f=f,
        g=lambda x, y, e: np.ones_like(y) + 0.0 * x[..., :1],
        F=_const(np.eye(2)),
        G=_const(np.zeros((1, 2))),
        jac_f_x=jfx,
        jac_f_y=jfy,
        jac_g_x=_const(np.zeros((1, 2))),
        jac_g_y=_const([[0.0]]),
        box=Box([-2.0], [0.0]),
        domain=lambda y: np.asarray(y)[..., 0] < 0.0,
        name=name,
    )
    facts = {
        "x_star": lambda y: np.zeros(np.asarray(y).shape[:-1] + (2,)),
        "x_minus_root": lambda z, y: np.asarray(z, float) ** 2,
        "reduced_drift": lambda z, y: y * z - z**3,
        "bifurcation_point": (np.zeros(2), np.zeros(1)),
    }
    return CatalogEntry(sys, NoiseParams(eps=0.01, sigma=0.03, rho=0.0), np.array([-0.4]), facts)


_BUILDERS = {
    "linear1d": _linear1d,
    "linear2d": _linear2d,
    "cubic": _cubic,
    "coupled1d": _coupled1d,
    "pitchfork": _pitchfork,
    "pitchfork_aug": lambda: _pitchfork_aug(False),
    "pitchfork_coupled": lambda: _pitchfork_aug(True),
}


def builtin_catalog():
    """Map of name -> :class:`CatalogEntry` for the benchmark systems."""
    return {name: build() for name, build in _BUILDERS.items()}


def get_system(name):
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(_BUILDERS)}") from None
