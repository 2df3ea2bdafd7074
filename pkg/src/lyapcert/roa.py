"""Region-of-attraction certification, volume estimates and trajectory checks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import expr as ex
from .expr import Box, Expr
from .falsifier import Atom, Budget, BudgetExhausted, Unsat, norm2, solve
from .network import LinearController, SystemSpec, closed_loop

__all__ = [
    "RoaCertificate", "Trajectory", "VolumeEstimate", "CannotCertify", "NonFiniteState",
    "certified_level", "sphere_minimum", "region_volume", "simulate",
    "lqr_baseline", "write_roa_grid", "write_trajectories", "ball_volume",
]

log = logging.getLogger(__name__)

MARGIN = 1e-3
BOUNDARY_TOL = 1e-3


class CannotCertify(RuntimeError):
    pass


class NonFiniteState(FloatingPointError):
    pass


@dataclass(frozen=True)
class RoaCertificate:
    beta: float
    radius: float
    sampled_beta: float
    volume_estimate: float = float("nan")
    volume_stderr: float = float("nan")
    method: str = "certified"

    def with_volume(self, vol: "VolumeEstimate") -> "RoaCertificate":
        return RoaCertificate(self.beta, self.radius, self.sampled_beta,
                              vol.volume, vol.stderr, self.method)


class VolumeEstimate(NamedTuple):
    volume: float
    stderr: float


def ball_volume(n: int, r: float) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r ** n


def _as_callable(V) -> Callable:
    if isinstance(V, Expr):
        return lambda X: ex.evaluate(V, X)
    return V


def sphere_points(n: int, r: float, count: int = 20000, seed=0) -> np.ndarray:
    """Points on the sphere of radius ``r``: a uniform angle grid in 2-D, random otherwise."""
    if n == 1:
        return np.array([[-r], [r]])
    if n == 2:
        t = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        return r * np.column_stack([np.cos(t), np.sin(t)])
    g = np.random.default_rng(seed).standard_normal((count, n))
    return r * g / np.linalg.norm(g, axis=1, keepdims=True)


def sphere_minimum(V, n: int, r: float, count: int = 20000, seed=0) -> float:
    """Minimum of ``V`` over sampled points of the sphere ``||x|| = r``."""
    return float(np.min(_as_callable(V)(sphere_points(n, r, count, seed))))


def _shell_unsat(V: Expr, n: int, r: float, beta: float, delta: float, budget: Budget) -> bool:
    tol = BOUNDARY_TOL * r
    r2 = norm2(n)
    clauses = [
        [Atom(r2, ">=", r * r - tol, weaken=False, label="shell_in")],
        [Atom(r2, "<=", r * r + tol, weaken=False, label="shell_out")],
        [Atom(V, "<=", beta, label="V<=beta")],
    ]
    box = Box.cube(n, math.sqrt(r * r + tol))
    try:
        return isinstance(solve(clauses, box, delta, budget=budget), Unsat)
    except BudgetExhausted:
        return False


def certified_level(V: Expr, n: int, radius: float, margin: float = MARGIN,
                    delta: float | None = None, budget: Budget = Budget(max_seconds=300),
                    bisection_steps: int = 20, floor: float = 1e-9,
                    n_sphere: int = 20000) -> RoaCertificate:
    """Largest certified ``beta`` with ``{V <= beta}`` inside the ball of ``radius``.

    Starts from ``(1 - margin)`` times the sampled boundary minimum and proves
    ``V > beta`` on a thin shell around the sphere; on failure ``beta`` is
    bisected downwards.  ``V`` must already be a verified Lyapunov function on
    the ball.
    """
    beta_hat = sphere_minimum(V, n, radius, n_sphere)
    if not beta_hat > floor:
        raise CannotCertify(f"sampled boundary minimum {beta_hat:.3g} is not positive")
    beta = (1.0 - margin) * beta_hat
    if delta is None:
        delta = 0.5 * margin * beta_hat

    if _shell_unsat(V, n, radius, beta, delta, budget):
        return RoaCertificate(beta, radius, beta_hat)
    lo, hi, best = floor, beta, None
    for _ in range(bisection_steps):
        mid = 0.5 * (lo + hi)
        if _shell_unsat(V, n, radius, mid, delta, budget):
            best, lo = mid, mid
        else:
            hi = mid
    if best is None:
        raise CannotCertify(f"no level above {floor} could be certified")
    return RoaCertificate(best, radius, beta_hat)


def region_volume(V, beta: float, domain, n_mc: int = 100000, seed=0) -> VolumeEstimate:
    """Monte Carlo volume of ``{x in domain : V(x) <= beta}``.

    ``domain`` is a :class:`SystemSpec`, a :class:`Box` or ``(n, radius)``.
    """
    from .training import sample_states  # local: training imports network only

    if n_mc < 10 ** 4:
        raise ValueError("n_mc must be at least 1e4")
    if isinstance(domain, SystemSpec):
        total = domain.domain_volume()
    elif isinstance(domain, Box):
        total = float(np.prod(domain.widths))
    else:
        total = ball_volume(int(domain[0]), float(domain[1]))
    X = sample_states(n_mc, domain, seed).points
    inside = np.asarray(_as_callable(V)(X)) <= beta
    frac = float(np.mean(inside))
    stderr = math.sqrt(frac * (1.0 - frac) / n_mc) * total
    return VolumeEstimate(frac * total, stderr)


@dataclass(frozen=True)
class Trajectory:
    dt: float
    T: float
    times: np.ndarray
    states: np.ndarray
    exited: np.ndarray | bool
    converged: np.ndarray | bool

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def simulate(system: SystemSpec, ctrl: LinearController, x0, dt: float, T: float,
             region: Callable | None = None, tol_converged: float = 1e-2) -> Trajectory:
    """Fixed-step classical RK4 on the closed-loop dynamics.

    ``x0`` may be a single state ``(n,)`` or a batch ``(B, n)``.  ``region`` is
    a vectorized predicate ``(B, n) -> bool``; ``exited`` records whether the
    state ever left it.
    """
    if not (dt > 0 and T > 0):
        raise ValueError("dt and T must be positive")
    f_exprs = closed_loop(system, ctrl)
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X = np.atleast_2d(x0).copy()
    steps = int(round(T / dt))

    def f(Y):
        return ex.evaluate(f_exprs, Y)

    states = np.empty((steps + 1,) + X.shape)
    states[0] = X
    exited = np.zeros(len(X), dtype=bool)
    if region is not None:
        exited |= ~np.asarray(region(X), dtype=bool)
    for k in range(steps):
        k1 = f(X)
        k2 = f(X + 0.5 * dt * k1)
        k3 = f(X + 0.5 * dt * k2)
        k4 = f(X + dt * k3)
        X = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise NonFiniteState(f"state blew up at t = {(k + 1) * dt:.4g}")
        states[k + 1] = X
        if region is not None:
            exited |= ~np.asarray(region(X), dtype=bool)
    converged = np.linalg.norm(X, axis=1) <= tol_converged
    times = dt * np.arange(steps + 1)
    if single:
        return Trajectory(dt, T, times, states[:, 0], bool(exited[0]), bool(converged[0]))
    return Trajectory(dt, T, times, states, exited, converged)


def lqr_baseline(system: SystemSpec, P, K, epsilon: float, delta: float,
                 budget: Budget = Budget(max_seconds=300), steps: int = 12,
                 margin: float = MARGIN) -> RoaCertificate:
    """Certified ROA of ``x' P x`` under ``u = -K x``, through the same pipeline.

    The quadratic is only a Lyapunov function near the origin, so the largest
    ball (up to the system's domain radius) on which it verifies is found by
    bisection first; the level set is then certified inside that ball.  The
    returned ``beta`` refers to the unscaled ``x' P x``.
    """
    from .falsifier import FalsificationProblem, check
    from .lqr import LqrSolution

    n = system.n
    P = np.asarray(P, dtype=float)
    # level sets are scale invariant, but the delta-weakened "V <= delta" atom
    # is not: scale P so V is well above delta on the epsilon sphere
    scale = max(1.0, 10.0 * delta / (float(np.linalg.eigvalsh(P)[0]) * epsilon))
    V = LqrSolution(scale * P, np.asarray(K, dtype=float), None, None).quadratic()
    ctrl = LinearController(-np.asarray(K, dtype=float))
    lieV = ex.sum_exprs(ex.differentiate(V, i) * fi
                        for i, fi in enumerate(closed_loop(system, ctrl)))

    def verified(r: float) -> bool:
        if r * r <= epsilon:
            return True
        p = FalsificationProblem(V, lieV, Box.cube(n, r), epsilon, delta, radius=r)
        try:
            return isinstance(check(p, budget), Unsat)
        except BudgetExhausted:
            return False

    r_max = float(system.radius if system.is_ball else np.min(system.domain_box().widths) / 2)
    if verified(r_max):
        r = r_max
    else:
        lo, hi = math.sqrt(epsilon), r_max
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if verified(mid):
                lo = mid
            else:
                hi = mid
        r = lo
    cert = certified_level(V, n, r, margin=margin, budget=budget)
    return RoaCertificate(cert.beta / scale, cert.radius, cert.sampled_beta / scale,
                          method="lqr")


def write_roa_grid(path, V, domain_box: Box, beta: float, grid_n: int = 101) -> Path:
    """Regular grid over the first two coordinates (others held at 0)."""
    n = domain_box.dim
    g0 = np.linspace(domain_box[0].lo, domain_box[0].hi, grid_n)
    g1 = np.linspace(domain_box[1].lo, domain_box[1].hi, grid_n) if n > 1 else np.zeros(1)
    A, B = np.meshgrid(g0, g1, indexing="ij")
    X = np.zeros((A.size, n))
    X[:, 0] = A.ravel()
    if n > 1:
        X[:, 1] = B.ravel()
    vals = np.asarray(_as_callable(V)(X))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*[f"x{i}" for i in range(n)], "V", "in_region"])
        for x, v in zip(X, vals):
            w.writerow([*[repr(float(c)) for c in x], repr(float(v)), int(v <= beta)])
    return path


def write_trajectories(path, traj: Trajectory) -> Path:
    states = traj.states if traj.states.ndim == 3 else traj.states[:, None, :]
    n = states.shape[2]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "t", *[f"x{i}" for i in range(n)]])
        for b in range(states.shape[1]):
            for t, x in zip(traj.times, states[:, b]):
                w.writerow([b, f"{t:.6g}", *[repr(float(c)) for c in x]])
    return path
