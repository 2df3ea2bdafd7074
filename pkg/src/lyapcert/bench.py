"""Built-in benchmark systems and reference data.

Textbook forms with configurable constants:

pendulum
    ``th'' = (g/l) sin th - b/(m l^2) th' + u/(m l^2)``, upright at ``th = 0``.
path_following
    kinematic unicycle/bicycle tracking a circle of curvature ``kappa`` at speed
    ``v`` in error coordinates ``(d_e, th_e)``; the input is the yaw-rate
    correction on top of the feedforward ``v * kappa``.
ducted_fan
    planar VTOL (Caltech ducted fan) with body-frame forces; the input is the
    deviation from hover thrust ``m g``.
nlink
    ``n`` point-mass links with absolute angles from the upright, one
    generalized torque per angle, viscous friction ``b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import expr as ex
from .expr import Expr
from .network import SystemSpec

__all__ = [
    "BenchmarkDef", "BENCHMARKS", "build", "reference_regions", "list_benchmarks",
    "UnknownBenchmark", "BadParams", "NoReferenceData", "EllipseRegion", "nlink_energy",
    "load_system_file",
]


class UnknownBenchmark(KeyError):
    pass


class BadParams(ValueError):
    pass


class NoReferenceData(LookupError):
    pass


def _positive(params: dict, *names):
    for k in names:
        if not params[k] > 0:
            raise BadParams(f"{k} must be positive, got {params[k]}")


def _pendulum(p: dict):
    _positive(p, "m", "l", "g")
    if p["b"] < 0:
        raise BadParams("friction b must be non-negative")
    th, om, u = ex.var(0), ex.var(1), ex.var(2)
    ml2 = p["m"] * p["l"] ** 2
    f = (om,
         (p["g"] / p["l"]) * ex.sin(th) - (p["b"] / ml2) * om + (1.0 / ml2) * u)
    return 2, 1, f


def _path_following(p: dict):
    _positive(p, "v", "kappa")
    d, th, u = ex.var(0), ex.var(1), ex.var(2)
    v, k = p["v"], p["kappa"]
    f = (v * ex.sin(th),
         (v * k + u) - (v * k) * ex.cos(th) / (1.0 - k * d))
    return 2, 1, f


def _ducted_fan(p: dict):
    _positive(p, "m", "J", "r", "g")
    if p["c"] < 0:
        raise BadParams("damping c must be non-negative")
    m, J, r, g, c = p["m"], p["J"], p["r"], p["g"], p["c"]
    x, y, th, vx, vy, om = (ex.var(i) for i in range(6))
    u1, u2 = ex.var(6), ex.var(7)
    thrust = m * g + u2
    s, co = ex.sin(th), ex.cos(th)
    f = (vx, vy, om,
         (u1 * co - thrust * s - c * vx) / m,
         (u1 * s + thrust * co - c * vy) / m - g,
         (r / J) * u1)
    return 6, 2, f


def _nlink_setup(p: dict):
    n = p["n"]
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise BadParams(f"number of links must be a positive integer, got {n!r}")
    masses = np.broadcast_to(np.asarray(p["masses"], dtype=float), (n,))
    lengths = np.broadcast_to(np.asarray(p["lengths"], dtype=float), (n,))
    if np.any(masses <= 0) or np.any(lengths <= 0):
        raise BadParams("link masses and lengths must be positive")
    if not p["g"] > 0 or p["b"] < 0:
        raise BadParams("need g > 0 and b >= 0")
    # mu[j] = total mass at or beyond link j
    mu = np.cumsum(masses[::-1])[::-1]
    return int(n), masses, lengths, mu


def _solve_symbolic(M, rhs):
    """Gaussian elimination without pivoting on a symmetric positive-definite Expr matrix."""
    n = len(rhs)
    M = [list(row) for row in M]
    rhs = list(rhs)
    for k in range(n):
        for i in range(k + 1, n):
            factor = M[i][k] / M[k][k]
            for j in range(k + 1, n):
                M[i][j] = M[i][j] - factor * M[k][j]
            rhs[i] = rhs[i] - factor * rhs[k]
    sol = [None] * n
    for i in reversed(range(n)):
        acc = rhs[i]
        for j in range(i + 1, n):
            acc = acc - M[i][j] * sol[j]
        sol[i] = acc / M[i][i]
    return sol


def _nlink(p: dict):
    n, masses, lengths, mu = _nlink_setup(p)
    g, b = p["g"], p["b"]
    q = [ex.var(i) for i in range(n)]
    qd = [ex.var(n + i) for i in range(n)]
    tau = [ex.var(2 * n + i) for i in range(n)]
    M = [[None] * n for _ in range(n)]
    for j in range(n):
        for k in range(n):
            c = float(mu[max(j, k)] * lengths[j] * lengths[k])
            M[j][k] = ex.const(c) if j == k else c * ex.cos(q[j] - q[k])
    rhs = []
    for j in range(n):
        coriolis = ex.sum_exprs(
            float(mu[max(j, k)] * lengths[j] * lengths[k]) * ex.sin(q[j] - q[k]) * qd[k] ** 2
            for k in range(n) if k != j
        )
        gravity = float(g * mu[j] * lengths[j]) * ex.sin(q[j])
        rhs.append(tau[j] + gravity - coriolis - b * qd[j])
    qdd = _solve_symbolic(M, rhs)
    return 2 * n, n, tuple(qd) + tuple(qdd)


def nlink_energy(params: dict, X) -> np.ndarray:
    """Total mechanical energy of the n-link model at states ``X`` (independent of the Exprs)."""
    p = {**BENCHMARKS["nlink"].defaults, **params}
    n, masses, lengths, _ = _nlink_setup(p)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q, qd = X[:, :n], X[:, n:2 * n]
    py = np.cumsum(lengths * np.cos(q), axis=1)
    vx = np.cumsum(lengths * np.cos(q) * qd, axis=1)
    vy = np.cumsum(-lengths * np.sin(q) * qd, axis=1)
    kinetic = 0.5 * np.sum(masses * (vx ** 2 + vy ** 2), axis=1)
    potential = p["g"] * np.sum(masses * py, axis=1)
    return kinetic + potential


@dataclass(frozen=True)
class BenchmarkDef:
    name: str
    builder: Callable
    defaults: dict
    radius: float
    target_epsilon: float
    description: str = ""
    state_names: tuple = field(default=())


BENCHMARKS = {
    "pendulum": BenchmarkDef(
        "pendulum", _pendulum, {"m": 1.0, "l": 1.0, "g": 9.81, "b": 0.1},
        radius=6.0, target_epsilon=0.04,
        description="inverted pendulum, states (theta, theta_dot), torque input",
        state_names=("theta", "theta_dot")),
    "path_following": BenchmarkDef(
        "path_following", _path_following, {"v": 1.0, "kappa": 1.0},
        radius=0.8, target_epsilon=0.01,
        description="kinematic vehicle tracking a unit circle, states (d_e, theta_e)",
        state_names=("d_e", "theta_e")),
    "ducted_fan": BenchmarkDef(
        "ducted_fan", _ducted_fan, {"m": 4.0, "J": 0.0475, "r": 0.25, "g": 9.8, "c": 0.05},
        radius=1.0, target_epsilon=0.01,
        description="planar ducted fan in hover, states (x, y, theta, xd, yd, thetad)",
        state_names=("x", "y", "theta", "x_dot", "y_dot", "theta_dot")),
    "nlink": BenchmarkDef(
        "nlink", _nlink, {"n": 2, "masses": 1.0, "lengths": 1.0, "g": 9.81, "b": 0.1},
        radius=0.5, target_epsilon=0.01,
        description="n-link planar balancing, states (angles, angular velocities)"),
}


def list_benchmarks() -> list[BenchmarkDef]:
    return list(BENCHMARKS.values())


def build(name: str, params: dict | None = None, radius: float | None = None) -> SystemSpec:
    """Instantiate a benchmark; ``nlink3`` style names set the link count."""
    params = dict(params or {})
    key = name
    if name.startswith("nlink") and name != "nlink":
        try:
            params.setdefault("n", int(name[5:].strip("()_")))
        except ValueError:
            raise UnknownBenchmark(name) from None
        key = "nlink"
    if key not in BENCHMARKS:
        raise UnknownBenchmark(name)
    bdef = BENCHMARKS[key]
    unknown = set(params) - set(bdef.defaults)
    if unknown:
        raise BadParams(f"unknown parameters for {key}: {sorted(unknown)}")
    p = {**bdef.defaults, **params}
    n, m, f = bdef.builder(p)
    spec = SystemSpec(n=n, m=m, dynamics=f, radius=float(radius or bdef.radius),
                      name=key, params=_jsonable(p))
    f0 = ex.evaluate(spec.dynamics, np.zeros(n + m))[0]
    if np.max(np.abs(f0)) > 1e-9:
        raise BadParams(f"{name}: origin is not an equilibrium (f(0) = {f0})")
    return spec


def _jsonable(p: dict) -> dict:
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in p.items()}


@dataclass(frozen=True)
class EllipseRegion:
    """Axis-aligned ellipse ``(x0/a)^2 + (x1/b)^2 <= 1`` given by its diameters."""

    label: str
    diameters: tuple

    @property
    def semi_axes(self) -> tuple:
        return tuple(d / 2.0 for d in self.diameters)

    @property
    def area(self) -> float:
        a, b = self.semi_axes
        return math.pi * a * b

    def level(self, X) -> np.ndarray:
        """``(x0/a)^2 + (x1/b)^2``; the region is ``level <= 1``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a, b = self.semi_axes
        return (X[:, 0] / a) ** 2 + (X[:, 1] / b) ** 2

    def contains(self, X) -> np.ndarray:
        return self.level(X) <= 1.0

    def as_expr(self) -> Expr:
        a, b = self.semi_axes
        return (1.0 / a ** 2) * ex.var(0) ** 2 + (1.0 / b ** 2) * ex.var(1) ** 2


_REFERENCE = {
    "pendulum": (
        EllipseRegion("sos", (1.75, 1.2)),
        EllipseRegion("lqr", (6.0, 0.1)),
    ),
}


def reference_regions(name: str) -> list[EllipseRegion]:
    """Published comparison regions (only the pendulum has any)."""
    if name not in _REFERENCE:
        raise NoReferenceData(f"no reference regions for {name!r}")
    return list(_REFERENCE[name])


def load_system_file(path) -> SystemSpec:
    """Read a custom system from a text file.

    Format, one directive per line (``;`` starts a comment)::

        state_dim 2
        input_dim 1
        radius 6.0
        f (var 1)
        f (add (mul 9.81 (sin (var 0))) (var 2))

    One ``f`` line per state, in order, in the s-expression syntax of
    :func:`lyapcert.expr.to_sexpr`.  ``(var 0)..(var n-1)`` are states and
    ``(var n)..`` are inputs.  ``box lo hi`` lines (one per state) may be
    given instead of ``radius``.
    """
    from pathlib import Path

    n = m = radius = None
    box, f = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if key == "state_dim":
                n = int(rest)
            elif key == "input_dim":
                m = int(rest)
            elif key == "radius":
                radius = float(rest)
            elif key == "box":
                lo, hi = rest.split()
                box.append((float(lo), float(hi)))
            elif key == "f":
                f.append(ex.parse_sexpr(rest))
            else:
                raise BadParams(f"unknown directive {key!r}")
        except ValueError as err:
            raise BadParams(f"{path}:{lineno}: {err}") from err
    if n is None or m is None:
        raise BadParams("state_dim and input_dim are required")
    if len(f) != n:
        raise BadParams(f"expected {n} 'f' lines, got {len(f)}")
    if (radius is None) == (not box):
        raise BadParams("give exactly one of radius or box lines")
    spec = SystemSpec(n=n, m=m, dynamics=tuple(f), radius=radius,
                      box=ex.Box(box) if box else None, name=Path(path).stem)
    f0 = ex.evaluate(spec.dynamics, np.zeros(n + m))[0]
    if np.max(np.abs(f0)) > 1e-9:
        raise BadParams(f"origin is not an equilibrium (f(0) = {f0})")
    return spec
