"""Empirical Lyapunov risk, its exact gradient, and the full-batch SGD learner.

The risk over samples ``x_1..x_N`` is::

    mean(max(0, -V(x_i)) + max(0, LieV(x_i))) + V(0)**2
        [+ mean(||x_i|| - alpha * V(x_i))   when the ROA regulator is on]

Gradients are computed by a hand-written reverse pass through the network's
primal and tangent (``dV . f``) computations, so both ``theta`` and the
controller gain receive exact derivatives.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import expr as ex
from .expr import Box
from .network import LinearController, LyapunovNet, SystemSpec, _forward_tangent

__all__ = [
    "TrainingSet", "RiskConfig", "StopCriteria", "LearnResult", "NonFiniteRisk",
    "sample_states", "empirical_risk", "risk_terms", "risk_gradient", "learn",
    "lyapunov_risk", "write_training_log",
]

INITIAL = "initial-sample"
COUNTEREXAMPLE = "counterexample"


class NonFiniteRisk(FloatingPointError):
    """The risk evaluated to inf or nan, usually from exploding parameters."""


@dataclass
class TrainingSet:
    points: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.points) < 1:
            raise ValueError("a training set needs at least one point")
        if not self.provenance:
            self.provenance = [INITIAL] * len(self.points)
        if len(self.provenance) != len(self.points):
            raise ValueError("one provenance tag per point")

    @property
    def N(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.N

    def add(self, x, tag: str = COUNTEREXAMPLE) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self.points = np.vstack([self.points, x])
        self.provenance.extend([tag] * len(x))


@dataclass(frozen=True)
class RiskConfig:
    roa_alpha: float = 0.0
    roa_regulator_enabled: bool = False
    learning_rate: float = 0.01
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.roa_alpha < 0:
            raise ValueError("roa_alpha must be non-negative")


@dataclass(frozen=True)
class StopCriteria:
    """Convergence = hinge part of the risk <= threshold for ``patience`` steps."""

    threshold: float = 0.0
    patience: int = 10
    max_iters: int = 2000


@dataclass
class LearnResult:
    net: LyapunovNet
    ctrl: LinearController
    iterations: int
    wall_time: float
    converged: bool
    risk: float
    history: list = field(default_factory=list)


def sample_states(n_samples: int, domain, seed=None) -> TrainingSet:
    """``n_samples`` i.i.d. uniform points in the domain.

    ``domain`` is a :class:`SystemSpec`, a ball radius together with the
    dimension as ``(n, radius)``, or a :class:`Box`.  Balls use rejection
    sampling from the bounding cube.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(domain, SystemSpec):
        box = domain.domain_box()
        radius = domain.radius
    elif isinstance(domain, Box):
        box, radius = domain, None
    else:
        n, radius = domain
        box = Box.cube(int(n), float(radius))
    lo, hi = box.lo, box.hi
    if radius is None:
        return TrainingSet(rng.uniform(lo, hi, (n_samples, box.dim)))
    chunks, have = [], 0
    while have < n_samples:
        cand = rng.uniform(lo, hi, (max(2 * (n_samples - have), 64), box.dim))
        cand = cand[np.einsum("ij,ij->i", cand, cand) <= radius ** 2]
        chunks.append(cand)
        have += len(cand)
    return TrainingSet(np.vstack(chunks)[:n_samples])


def lyapunov_risk(V: Callable, lie_V: Callable, X, alpha: float | None = None) -> float:
    """Empirical risk of an arbitrary candidate.

    ``V`` and ``lie_V`` are vectorized callables ``(N, n) -> (N,)``.  With
    ``alpha`` given, the ROA regulator term is added.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    v = np.asarray(V(X), dtype=float)
    lv = np.asarray(lie_V(X), dtype=float)
    v0 = float(np.asarray(V(np.zeros((1, X.shape[1]))), dtype=float).ravel()[0])
    risk = np.mean(np.maximum(0.0, -v) + np.maximum(0.0, lv)) + v0 * v0
    if alpha is not None:
        risk += np.mean(np.linalg.norm(X, axis=1) - alpha * v)
    return float(risk)


@lru_cache(maxsize=32)
def _input_jacobian(system: SystemSpec) -> tuple:
    """``d f_k / d u_j`` as Exprs, indexed ``[k][j]``."""
    n = system.n
    return tuple(
        tuple(ex.differentiate(fk, n + j) for j in range(system.m))
        for fk in system.dynamics
    )


def _evaluate_all(net, ctrl, system, X, cfg):
    """Forward quantities shared by risk and gradient."""
    U = ctrl(X)
    XU = np.hstack([X, U])
    F = ex.evaluate(system.dynamics, XU)
    V, LieV, cache = _forward_tangent(net, X, F)
    V0, _, cache0 = _forward_tangent(net, np.zeros((1, system.n)))
    return XU, F, V, LieV, cache, float(V0[0]), cache0


def _terms(X, V, LieV, V0, cfg):
    hinge = float(np.mean(np.maximum(0.0, -V) + np.maximum(0.0, LieV)))
    reg = 0.0
    if cfg.roa_regulator_enabled:
        reg = float(np.mean(np.linalg.norm(X, axis=1) - cfg.roa_alpha * V))
    return hinge, V0 * V0, reg


def risk_terms(net, ctrl, system, ts: TrainingSet, cfg: RiskConfig) -> dict:
    """Risk split into ``hinge``, ``origin`` (V(0)^2) and ``regulator`` parts."""
    X = ts.points
    _, _, V, LieV, _, V0, _ = _evaluate_all(net, ctrl, system, X, cfg)
    hinge, origin, reg = _terms(X, V, LieV, V0, cfg)
    total = hinge + origin + reg
    if not np.isfinite(total):
        raise NonFiniteRisk(f"risk is {total}")
    return {"hinge": hinge, "origin": origin, "regulator": reg, "total": total}


def empirical_risk(net, ctrl, system, ts: TrainingSet, cfg: RiskConfig) -> float:
    return risk_terms(net, ctrl, system, ts, cfg)["total"]


def _backward(net: LyapunovNet, cache, gV, gT):
    """Reverse pass through the primal and tangent streams.

    ``gV``/``gT`` are dL/dV and dL/d(dV.t) per sample.  Returns the flat
    parameter gradient and dL/dt at the input.
    """
    N = gV.shape[0]
    gh = gV.reshape(N, 1)
    ght = gT.reshape(N, 1)
    grads = []
    for (W, _), (a, t, z, zt, h, s, act) in zip(reversed(net.layers), reversed(cache)):
        if act:
            if zt is None:
                gz = s * gh
            else:
                gz = s * gh - 2.0 * h * s * zt * ght
            gzt = s * ght
        else:
            gz, gzt = gh, ght
        dW = gz.T @ a
        if t is not None:
            dW = dW + gzt.T @ t
        db = gz.sum(axis=0)
        grads.append(np.concatenate([dW.ravel(), db]))
        gh = gz @ W
        ght = gzt @ W
    return np.concatenate(grads[::-1]), ght


def _risk_and_grad(net, ctrl, system, X, cfg):
    N = X.shape[0]
    XU, F, V, LieV, cache, V0, cache0 = _evaluate_all(net, ctrl, system, X, cfg)
    hinge, origin, reg = _terms(X, V, LieV, V0, cfg)
    total = hinge + origin + reg
    if not np.isfinite(total):
        raise NonFiniteRisk(f"risk is {total}")

    gV = np.where(V < 0.0, -1.0, 0.0) / N
    if cfg.roa_regulator_enabled:
        gV = gV - cfg.roa_alpha / N
    gT = np.where(LieV > 0.0, 1.0, 0.0) / N
    g_theta, g_F = _backward(net, cache, gV, gT)
    g0, _ = _backward(net, cache0, np.array([2.0 * V0]), np.zeros(1))
    g_theta = g_theta + g0

    # F_k = f_k(x, K x)  =>  dF_k/dK[j, i] = (df_k/du_j) x_i
    jac = _input_jacobian(system)
    B = np.stack([ex.evaluate(list(row), XU) if system.m else np.zeros((N, 0))
                  for row in jac], axis=1)  # (N, n, m)
    g_u = np.einsum("nk,nkj->nj", g_F, B)
    g_K = g_u.T @ X
    terms = {"hinge": hinge, "origin": origin, "regulator": reg, "total": total}
    return terms, g_theta, g_K


def risk_gradient(net, ctrl, system, ts: TrainingSet, cfg: RiskConfig):
    """``(grad_theta, grad_K)``; hinge subgradients are 0 at the kink."""
    _, g_theta, g_K = _risk_and_grad(net, ctrl, system, ts.points, cfg)
    return g_theta, g_K


def learn(net: LyapunovNet, ctrl: LinearController, system: SystemSpec, ts: TrainingSet,
          cfg: RiskConfig = RiskConfig(), stop: StopCriteria = StopCriteria(),
          log: list | None = None, iteration_offset: int = 0) -> LearnResult:
    """Full-batch gradient descent on ``theta`` and ``K`` jointly.

    Stops once the hinge part of the risk has been ``<= stop.threshold`` for
    ``stop.patience`` consecutive evaluations, or after ``stop.max_iters``
    parameter updates.  Rows ``(iteration, risk, wall_time_s)`` are appended to
    ``log`` when given.
    """
    t0 = time.perf_counter()
    X = ts.points
    lr = cfg.learning_rate
    theta = net.parameters()
    K = np.array(ctrl.K)
    opt = _Adam(theta.size + K.size, lr) if cfg.optimizer == "adam" else None
    streak = 0
    it = 0
    converged = False
    history = []
    cur_net, cur_ctrl = net, ctrl
    risk = float("nan")
    while True:
        terms, g_theta, g_K = _risk_and_grad(cur_net, cur_ctrl, system, X, cfg)
        risk = terms["total"]
        history.append(risk)
        if log is not None:
            log.append((iteration_offset + it, risk, time.perf_counter() - t0))
        streak = streak + 1 if terms["hinge"] <= stop.threshold else 0
        if streak >= stop.patience:
            converged = True
            break
        if it >= stop.max_iters:
            break
        if opt is None:
            theta = theta - lr * g_theta
            K = K - lr * g_K
        else:
            step = opt.step(np.concatenate([g_theta, g_K.ravel()]))
            theta = theta - step[:theta.size]
            K = K - step[theta.size:].reshape(K.shape)
        cur_net = net.with_parameters(theta)
        cur_ctrl = LinearController(K)
        it += 1
    return LearnResult(cur_net, cur_ctrl, it, time.perf_counter() - t0, converged, risk, history)


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def write_training_log(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "risk", "wall_time_s"])
        for it, risk, t in rows:
            w.writerow([it, repr(float(risk)), f"{t:.6f}"])
    return path
