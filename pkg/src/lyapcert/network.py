"""Hypothesis classes: tanh Lyapunov networks and linear feedback controllers.

Both are immutable snapshots; training returns new objects.  The same
function is available in two forms that must agree: a numpy forward pass
(for the learner) and a compiled :class:`~lyapcert.expr.Expr` (for the
falsifier).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Box, Expr

__all__ = [
    "LyapunovNet", "LinearController", "SystemSpec", "DimensionMismatch",
    "forward", "closed_loop", "lie_derivative_at", "compile_V", "compile_lieV",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "lyapcert-checkpoint"


class DimensionMismatch(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class LyapunovNet:
    """Feedforward network ``R^n -> R`` with tanh hidden layers.

    ``layers`` is a sequence of ``(W, b)`` pairs, ``W`` of shape
    ``(out, in)``.  The last layer has a single output and is linear unless
    ``output_tanh`` is set.
    """

    def __init__(self, layers: Sequence[tuple], output_tanh: bool = False):
        if not layers:
            raise ValueError("need at least one layer")
        frozen = []
        prev = None
        for W, b in layers:
            W, b = _frozen(np.atleast_2d(W)), _frozen(np.ravel(b))
            if W.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"weight {W.shape} and bias {b.shape} disagree")
            if prev is not None and W.shape[1] != prev:
                raise DimensionMismatch(f"layer input {W.shape[1]} != previous output {prev}")
            prev = W.shape[0]
            frozen.append((W, b))
        if prev != 1:
            raise DimensionMismatch("output layer must have width 1")
        self.layers = tuple(frozen)
        self.output_tanh = bool(output_tanh)

    @classmethod
    def random(cls, n: int, hidden: Sequence[int] = (6,), seed=None,
               output_tanh: bool = False) -> "LyapunovNet":
        """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        sizes = [n, *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)),
                           rng.uniform(-bound, bound, fan_out)))
        return cls(layers, output_tanh)

    @classmethod
    def zeros(cls, n: int, hidden: Sequence[int] = (6,), output_tanh: bool = False):
        sizes = [n, *hidden, 1]
        return cls([(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])],
                   output_tanh)

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(W.shape[0] for W, _ in self.layers[:-1])

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def parameters(self) -> np.ndarray:
        """Flat parameter vector ``theta`` (each layer: W row-major, then b)."""
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_parameters(self, theta) -> "LyapunovNet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        layers, k = [], 0
        for W, b in self.layers:
            nW = theta[k:k + W.size].reshape(W.shape)
            k += W.size
            nb = theta[k:k + b.size]
            k += b.size
            layers.append((nW, nb))
        return LyapunovNet(layers, self.output_tanh)

    def __call__(self, x):
        return forward(self, x)

    def __eq__(self, other):
        return (isinstance(other, LyapunovNet) and self.output_tanh == other.output_tanh
                and len(self.layers) == len(other.layers)
                and all(np.array_equal(W1, W2) and np.array_equal(b1, b2)
                        for (W1, b1), (W2, b2) in zip(self.layers, other.layers)))

    def __repr__(self):
        return (f"LyapunovNet(n={self.n_inputs}, hidden={self.hidden}, "
                f"output_tanh={self.output_tanh})")


class LinearController:
    """State feedback ``u(x) = K x`` with gain ``K`` of shape ``(m, n)``; no bias."""

    def __init__(self, K):
        self.K = _frozen(np.atleast_2d(K))

    @classmethod
    def zeros(cls, m: int, n: int) -> "LinearController":
        return cls(np.zeros((m, n)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.K.shape

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.K.T

    def __eq__(self, other):
        return isinstance(other, LinearController) and np.array_equal(self.K, other.K)

    def __repr__(self):
        return f"LinearController(K={self.K.tolist()})"


@dataclass(frozen=True)
class SystemSpec:
    """Open-loop dynamics ``dx/dt = f(x, u)`` on a verification domain.

    ``dynamics[i]`` is an Expr over ``Var(0..n-1)`` (state) and
    ``Var(n..n+m-1)`` (input).  The domain is the ball ``||x||_2 <= radius``
    unless ``box`` is given.
    """

    n: int
    m: int
    dynamics: tuple
    radius: float | None = None
    box: Box | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dynamics", tuple(self.dynamics))
        if len(self.dynamics) != self.n:
            raise DimensionMismatch(f"{len(self.dynamics)} dynamics for {self.n} states")
        if ex.max_var_index(self.dynamics) >= self.n + self.m:
            raise DimensionMismatch("dynamics reference a variable beyond n + m")
        if (self.radius is None) == (self.box is None):
            raise ValueError("give exactly one of radius or box")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("domain radius must be positive")
        if self.box is not None and self.box.dim != self.n:
            raise DimensionMismatch("domain box dimension != n")

    @property
    def is_ball(self) -> bool:
        return self.radius is not None

    def domain_box(self) -> Box:
        if self.box is not None:
            return self.box
        return Box.cube(self.n, self.radius)

    def in_domain(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_ball:
            return np.einsum("ij,ij->i", X, X) <= self.radius ** 2
        return np.all((X >= self.box.lo) & (X <= self.box.hi), axis=1)

    def domain_volume(self) -> float:
        if self.is_ball:
            return math.pi ** (self.n / 2) / math.gamma(self.n / 2 + 1) * self.radius ** self.n
        return float(np.prod(self.box.widths))

    def f(self, X, U) -> np.ndarray:
        """Open-loop vector field at states ``X`` (N, n) and inputs ``U`` (N, m)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return ex.evaluate(self.dynamics, np.hstack([X, U]))

    def to_dict(self) -> dict:
        d = {"name": self.name, "n": self.n, "m": self.m,
             "dynamics": [ex.to_sexpr(e) for e in self.dynamics]}
        if self.is_ball:
            d["domain"] = {"radius": self.radius}
        else:
            d["domain"] = {"box": [[iv.lo, iv.hi] for iv in self.box]}
        if self.params:
            d["params"] = dict(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        dom = d["domain"]
        return cls(
            n=int(d["n"]), m=int(d["m"]),
            dynamics=tuple(ex.parse_sexpr(s) for s in d["dynamics"]),
            radius=dom.get("radius"),
            box=Box(dom["box"]) if "box" in dom else None,
            name=d.get("name", "custom"),
            params=dict(d.get("params", {})),
        )


# ---------------------------------------------------------------------------

def _forward_tangent(net: LyapunovNet, X, T=None):
    """Forward pass with an optional tangent direction.

    Returns ``V`` (N,), the directional derivative ``dV . T`` (N,) when ``T`` is
    given, and the per-layer cache used by the reverse pass.
    """
    a = X
    t = T
    cache = []
    last = len(net.layers) - 1
    for k, (W, b) in enumerate(net.layers):
        z = a @ W.T + b
        zt = None if t is None else t @ W.T
        act = k < last or net.output_tanh
        if act:
            h = np.tanh(z)
            s = 1.0 - h * h
            ht = None if zt is None else s * zt
        else:
            h, s, ht = z, None, zt
        cache.append((a, t, z, zt, h, s, act))
        a, t = h, ht
    return a[:, 0], (None if t is None else t[:, 0]), cache


def forward(net: LyapunovNet, x):
    """``V_theta(x)``; ``x`` of shape ``(n,)`` gives a float, ``(N, n)`` an array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.n_inputs:
        raise DimensionMismatch(f"state has dim {X.shape[1]}, network expects {net.n_inputs}")
    V, _, _ = _forward_tangent(net, X)
    return float(V[0]) if single else V


def gradient(net: LyapunovNet, X) -> np.ndarray:
    """Exact input gradient ``dV/dx`` at the rows of ``X``; shape ``(N, n)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, _, cache = _forward_tangent(net, X)
    g = np.ones((X.shape[0], 1))
    for (W, _), (_, _, _, _, _, s, act) in zip(reversed(net.layers), reversed(cache)):
        if act:
            g = g * s
        g = g @ W
    return g


def closed_loop(system: SystemSpec, ctrl: LinearController) -> tuple:
    """Substitute ``u_j = sum_i K[j, i] x_i`` into the open-loop dynamics."""
    if ctrl.shape != (system.m, system.n):
        raise DimensionMismatch(f"gain shape {ctrl.shape} != ({system.m}, {system.n})")
    n = system.n
    mapping = {
        n + j: ex.sum_exprs(float(ctrl.K[j, i]) * ex.var(i) for i in range(n))
        for j in range(system.m)
    }
    return tuple(ex.substitute(e, mapping) for e in system.dynamics)


def closed_loop_field(system: SystemSpec, ctrl: LinearController, X) -> np.ndarray:
    """Numeric closed-loop vector field at the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return system.f(X, ctrl(X))


def lie_derivative_at(net: LyapunovNet, system: SystemSpec, ctrl: LinearController, x):
    """``sum_i dV/dx_i * f_i(x)`` with exact network derivatives."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != system.n or net.n_inputs != system.n:
        raise DimensionMismatch("state, network and system dimensions disagree")
    F = closed_loop_field(system, ctrl, X)
    _, LieV, _ = _forward_tangent(net, X, F)
    return float(LieV[0]) if single else LieV


def compile_V(net: LyapunovNet) -> Expr:
    """The network as an Expr over ``Var(0..n-1)``."""
    a = [ex.var(i) for i in range(net.n_inputs)]
    last = len(net.layers) - 1
    for k, (W, b) in enumerate(net.layers):
        z = [
            ex.sum_exprs(float(W[j, i]) * a[i] for i in range(W.shape[1])) + float(b[j])
            for j in range(W.shape[0])
        ]
        a = [ex.tanh(zj) for zj in z] if (k < last or net.output_tanh) else z
    return a[0]


def compile_lieV(net: LyapunovNet, system: SystemSpec, ctrl: LinearController,
                 V: Expr | None = None) -> Expr:
    """``sum_i d(compile_V)/dx_i * closed_loop[i]`` as an Expr."""
    if V is None:
        V = compile_V(net)
    f = closed_loop(system, ctrl)
    return ex.sum_exprs(ex.differentiate(V, i) * f[i] for i in range(system.n))


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_dict(net: LyapunovNet, ctrl: LinearController | None = None,
                    system: SystemSpec | None = None, **meta) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "state_dim": net.n_inputs,
        "output_tanh": net.output_tanh,
        "layers": [
            {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in net.layers
        ],
    }
    if ctrl is not None:
        d["controller"] = {"shape": list(ctrl.shape), "gain": ctrl.K.ravel().tolist()}
    if system is not None:
        d["system"] = system.to_dict()
    if meta:
        d["meta"] = meta
    return d


def checkpoint_from_dict(d: dict):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a lyapcert checkpoint")
    layers = []
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        layers.append((np.array(layer["weights"], dtype=float).reshape(shape),
                       np.array(layer["bias"], dtype=float)))
    net = LyapunovNet(layers, d.get("output_tanh", False))
    ctrl = None
    if "controller" in d:
        c = d["controller"]
        ctrl = LinearController(np.array(c["gain"], dtype=float).reshape(tuple(c["shape"])))
    system = SystemSpec.from_dict(d["system"]) if "system" in d else None
    return net, ctrl, system


def save_checkpoint(path, net, ctrl=None, system=None, **meta) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(net, ctrl, system, **meta), indent=1))
    return path


def load_checkpoint(path):
    """Returns ``(net, ctrl, system)``; the latter two may be ``None``."""
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
