"""Scalar expression DAGs over state variables.

An :class:`Expr` is an immutable node.  Sharing a node object between several
parents gives a DAG; every evaluator memoizes on node identity so a shared
subexpression is evaluated once.

Three evaluators are provided:

* :func:`eval_point` - plain IEEE evaluation at a single point,
* :func:`evaluate` - the same, vectorized over many points,
* :func:`eval_interval` / :class:`Program` - sound interval enclosures with
  outward rounding, vectorized over many boxes.

Input variables of open-loop dynamics are ordinary ``Var`` nodes whose index
is offset by the state dimension (``u_j`` is ``Var(n + j)``).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr", "const", "var", "sin", "cos", "tanh", "sum_exprs",
    "Interval", "Box", "Program",
    "eval_point", "evaluate", "eval_interval", "differentiate", "substitute",
    "to_sexpr", "parse_sexpr", "max_var_index",
    "DivisionByZero", "NonFiniteResult", "DomainError",
]

_UNARY = ("neg", "sin", "cos", "tanh")
_BINARY = ("add", "sub", "mul", "div")
_OPS = ("const", "var", "pow") + _UNARY + _BINARY


class DivisionByZero(ZeroDivisionError):
    pass


class NonFiniteResult(ArithmeticError):
    pass


class DomainError(ArithmeticError):
    """Interval evaluation divided by an interval containing zero."""


class Expr:
    """Immutable expression node.

    ``op`` is one of ``const, var, neg, add, sub, mul, div, pow, sin, cos,
    tanh``.  ``value`` holds the constant for ``const``, the variable index for
    ``var`` and the integer exponent for ``pow``.
    """

    __slots__ = ("op", "args", "value")

    def __init__(self, op: str, args: tuple = (), value=None):
        if op not in _OPS:
            raise ValueError(f"unknown op {op!r}")
        if op == "var" and (not isinstance(value, (int, np.integer)) or value < 0):
            raise ValueError("var index must be a non-negative integer")
        if op == "pow" and (not isinstance(value, (int, np.integer)) or value < 0):
            raise ValueError("pow exponent must be a non-negative integer")
        if op == "const":
            value = float(value)
        elif value is not None:
            value = int(value)
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "args", tuple(args))
        object.__setattr__(self, "value", value)

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __repr__(self):
        return to_sexpr(self)

    # structural equality is deliberately not overloaded: == builds nothing and
    # compares identity, which keeps Expr usable as a dict key by node.

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, k):
        return _pow(self, k)


def const(c: float) -> Expr:
    return Expr("const", value=c)


def var(i: int) -> Expr:
    return Expr("var", value=i)


ZERO = const(0.0)
ONE = const(1.0)


def _wrap(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return const(float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to Expr")


def _is(e: Expr, c: float) -> bool:
    return e.op == "const" and e.value == c


# Builders below fold constants and apply only 0/1 identities.

def _add(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Expr("add", (a, b))


def _sub(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return Expr("sub", (a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return _neg(b)
    if _is(b, -1.0):
        return _neg(a)
    return Expr("mul", (a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        raise DivisionByZero("division by constant zero")
    if a.is_const and b.is_const:
        return const(a.value / b.value)
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return Expr("div", (a, b))


def _neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def _pow(a: Expr, k) -> Expr:
    if isinstance(k, Expr):
        if not k.is_const or k.value != int(k.value):
            raise ValueError("only constant integer exponents are supported")
        k = int(k.value)
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise ValueError("exponent must be a non-negative integer")
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    if a.is_const:
        return const(a.value ** k)
    return Expr("pow", (a,), k)


def _unary(op: str, fn: Callable[[float], float]) -> Callable[[Expr], Expr]:
    def build(a) -> Expr:
        a = _wrap(a)
        if a.is_const:
            return const(fn(a.value))
        return Expr(op, (a,))
    build.__name__ = op
    return build


sin = _unary("sin", math.sin)
cos = _unary("cos", math.cos)
tanh = _unary("tanh", math.tanh)


def sum_exprs(terms: Iterable) -> Expr:
    """Left-to-right sum; returns ``0`` for an empty iterable."""
    out = ZERO
    for t in terms:
        out = out + t
    return out


def _topo(roots: Sequence[Expr]) -> list[Expr]:
    """Post-order of all nodes reachable from ``roots`` (children first)."""
    order: list[Expr] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in reversed(node.args):
                if id(child) not in seen:
                    stack.append((child, False))
    return order


def max_var_index(e: Expr | Sequence[Expr]) -> int:
    """Largest ``Var`` index in ``e``, or ``-1`` if it has none."""
    roots = [e] if isinstance(e, Expr) else list(e)
    return max((n.value for n in _topo(roots) if n.op == "var"), default=-1)


# ---------------------------------------------------------------------------
# point evaluation

_POINT_FN = {"sin": math.sin, "cos": math.cos, "tanh": math.tanh}


def eval_point(e: Expr, x: Sequence[float]) -> float:
    """Evaluate ``e`` at the point ``x`` in double precision.

    Raises :class:`DivisionByZero` on division by exact zero and
    :class:`NonFiniteResult` when the result is inf or nan.
    """
    x = [float(v) for v in np.ravel(x)]
    vals: dict[int, float] = {}
    for node in _topo([e]):
        op = node.op
        if op == "const":
            v = node.value
        elif op == "var":
            if node.value >= len(x):
                raise IndexError(f"var {node.value} out of range for point of dim {len(x)}")
            v = x[node.value]
        elif op == "neg":
            v = -vals[id(node.args[0])]
        elif op == "pow":
            v = vals[id(node.args[0])] ** node.value
        elif op in _POINT_FN:
            v = _POINT_FN[op](vals[id(node.args[0])])
        else:
            a, b = vals[id(node.args[0])], vals[id(node.args[1])]
            if op == "add":
                v = a + b
            elif op == "sub":
                v = a - b
            elif op == "mul":
                v = a * b
            else:
                if b == 0.0:
                    raise DivisionByZero("division by zero in eval_point")
                v = a / b
        vals[id(node)] = v
    out = vals[id(e)]
    if not math.isfinite(out):
        raise NonFiniteResult(f"non-finite value {out}")
    return out


_ARRAY_FN = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh}


def evaluate(exprs: Expr | Sequence[Expr], X) -> np.ndarray:
    """Vectorized point evaluation.

    ``X`` has shape ``(N, d)`` (or ``(d,)``).  Returns shape ``(N,)`` for a
    single expression, ``(N, k)`` for a sequence of ``k`` expressions.
    No domain errors are raised; division by zero yields inf/nan.
    """
    single = isinstance(exprs, Expr)
    roots = [exprs] if single else list(exprs)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = X.shape[0]
    vals: dict[int, np.ndarray] = {}
    with np.errstate(all="ignore"):
        for node in _topo(roots):
            op = node.op
            if op == "const":
                v = np.full(N, node.value)
            elif op == "var":
                v = X[:, node.value]
            elif op == "neg":
                v = -vals[id(node.args[0])]
            elif op == "pow":
                v = vals[id(node.args[0])] ** node.value
            elif op in _ARRAY_FN:
                v = _ARRAY_FN[op](vals[id(node.args[0])])
            else:
                a, b = vals[id(node.args[0])], vals[id(node.args[1])]
                if op == "add":
                    v = a + b
                elif op == "sub":
                    v = a - b
                elif op == "mul":
                    v = a * b
                else:
                    v = a / b
            vals[id(node)] = v
    if single:
        return np.array(vals[id(exprs)], dtype=float)
    if not roots:
        return np.zeros((N, 0))
    return np.stack([vals[id(r)] for r in roots], axis=1)


# ---------------------------------------------------------------------------
# intervals

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise ValueError(f"invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def __contains__(self, x) -> bool:
        return self.lo <= x <= self.hi

    def issubset(self, other: "Interval") -> bool:
        return other.lo <= self.lo and self.hi <= other.hi


class Box:
    """Axis-aligned box, one :class:`Interval` per state variable."""

    __slots__ = ("intervals",)

    def __init__(self, intervals: Iterable):
        ivs = tuple(iv if isinstance(iv, Interval) else Interval(*iv) for iv in intervals)
        object.__setattr__(self, "intervals", ivs)

    def __setattr__(self, name, value):
        raise AttributeError("Box is immutable")

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        return cls(zip(np.ravel(lo), np.ravel(hi)))

    @classmethod
    def cube(cls, n: int, r: float) -> "Box":
        return cls([(-r, r)] * n)

    @property
    def dim(self) -> int:
        return len(self.intervals)

    @property
    def lo(self) -> np.ndarray:
        return np.array([iv.lo for iv in self.intervals])

    @property
    def hi(self) -> np.ndarray:
        return np.array([iv.hi for iv in self.intervals])

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def __getitem__(self, i) -> Interval:
        return self.intervals[i]

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def __eq__(self, other):
        return isinstance(other, Box) and self.intervals == other.intervals

    def __hash__(self):
        return hash(self.intervals)

    def __repr__(self):
        inner = ", ".join(f"[{iv.lo:.6g}, {iv.hi:.6g}]" for iv in self.intervals)
        return f"Box({inner})"

    def contains(self, x) -> bool:
        x = np.ravel(x)
        return bool(np.all(self.lo <= x) and np.all(x <= self.hi))

    def issubset(self, other: "Box") -> bool:
        return all(a.issubset(b) for a, b in zip(self.intervals, other.intervals))

    def split(self, i: int | None = None) -> tuple["Box", "Box"]:
        """Bisect along dimension ``i`` (default: the widest)."""
        if i is None:
            i = int(np.argmax(self.widths))
        iv = self.intervals[i]
        m = iv.mid
        left = list(self.intervals)
        right = list(self.intervals)
        left[i] = Interval(iv.lo, m)
        right[i] = Interval(m, iv.hi)
        return Box(left), Box(right)


_EPS = 2.0 ** -52
_TINY = 2.0 ** -1074
# transcendental results get a few ulps of slack: libm sin/cos/tanh are not
# guaranteed correctly rounded
_TRANS_ULPS = 4


def _down(x: np.ndarray, ulps: int = 1) -> np.ndarray:
    if ulps == 1:
        return np.nextafter(x, -np.inf)
    return x - (np.abs(x) * (ulps * _EPS) + ulps * _TINY)


def _up(x: np.ndarray, ulps: int = 1) -> np.ndarray:
    if ulps == 1:
        return np.nextafter(x, np.inf)
    return x + (np.abs(x) * (ulps * _EPS) + ulps * _TINY)


_TWO_PI = 2.0 * math.pi


def _contains_point(lo, hi, phase):
    """Whether ``[lo, hi]`` contains ``phase + 2*pi*k`` for some integer k.

    The test is widened by a relative tolerance so rounding can only produce
    false positives (which loosen, never break, the enclosure).
    """
    tol = 1e-9 * (1.0 + np.abs(lo) + np.abs(hi))
    k = np.ceil((lo - tol - phase) / _TWO_PI)
    return phase + _TWO_PI * k <= hi + tol


def _iv_sin(lo, hi):
    a, b = np.sin(lo), np.sin(hi)
    rlo = _down(np.minimum(a, b), _TRANS_ULPS)
    rhi = _up(np.maximum(a, b), _TRANS_ULPS)
    rhi = np.where(_contains_point(lo, hi, 0.5 * math.pi), 1.0, rhi)
    rlo = np.where(_contains_point(lo, hi, -0.5 * math.pi), -1.0, rlo)
    full = (hi - lo) >= _TWO_PI
    rlo = np.where(full, -1.0, np.maximum(rlo, -1.0))
    rhi = np.where(full, 1.0, np.minimum(rhi, 1.0))
    return rlo, rhi


def _iv_cos(lo, hi):
    a, b = np.cos(lo), np.cos(hi)
    rlo = _down(np.minimum(a, b), _TRANS_ULPS)
    rhi = _up(np.maximum(a, b), _TRANS_ULPS)
    rhi = np.where(_contains_point(lo, hi, 0.0), 1.0, rhi)
    rlo = np.where(_contains_point(lo, hi, math.pi), -1.0, rlo)
    full = (hi - lo) >= _TWO_PI
    rlo = np.where(full, -1.0, np.maximum(rlo, -1.0))
    rhi = np.where(full, 1.0, np.minimum(rhi, 1.0))
    return rlo, rhi


def _iv_tanh(lo, hi):
    rlo = np.maximum(_down(np.tanh(lo), _TRANS_ULPS), -1.0)
    rhi = np.minimum(_up(np.tanh(hi), _TRANS_ULPS), 1.0)
    return rlo, rhi


def _iv_mul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return _down(lo), _up(hi)


def _iv_pow(lo, hi, k):
    a, b = lo ** k, hi ** k
    ulps = k  # repeated multiplication: at most k-1 roundings
    if k % 2 == 1:
        return _down(a, ulps), _up(b, ulps)
    straddle = (lo < 0.0) & (hi > 0.0)
    rlo = np.where(straddle, 0.0, np.minimum(a, b))
    rhi = np.maximum(a, b)
    rlo = np.maximum(_down(rlo, ulps), 0.0)
    return rlo, _up(rhi, ulps)


class Program:
    """A set of expressions compiled for batched interval evaluation.

    Nodes shared between the outputs are evaluated once per batch.
    """

    def __init__(self, exprs: Sequence[Expr]):
        self.exprs = list(exprs)
        nodes = _topo(self.exprs)
        index = {id(n): k for k, n in enumerate(nodes)}
        self._code = [
            (n.op, tuple(index[id(c)] for c in n.args), n.value) for n in nodes
        ]
        self._out = [index[id(e)] for e in self.exprs]
        self.n_vars = max_var_index(self.exprs) + 1

    def __len__(self):
        return len(self._code)

    def interval(self, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Enclose every output over a batch of boxes.

        ``lo``/``hi`` have shape ``(B, d)``.  Returns ``(out_lo, out_hi,
        failed)`` with the first two of shape ``(B, k)``.  ``failed[b, j]`` is
        true when output ``j`` hit a division by an interval containing zero
        or overflowed on box ``b``; such entries are reported as
        ``[-inf, inf]``.
        """
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        B = lo.shape[0]
        L: list = [None] * len(self._code)
        H: list = [None] * len(self._code)
        F: list = [None] * len(self._code)
        no_fail = np.zeros(B, dtype=bool)
        with np.errstate(all="ignore"):
            for k, (op, args, value) in enumerate(self._code):
                fail = no_fail
                if op == "const":
                    l = h = np.full(B, value)
                elif op == "var":
                    l, h = lo[:, value], hi[:, value]
                else:
                    a = args[0]
                    alo, ahi = L[a], H[a]
                    fail = F[a]
                    if op == "neg":
                        l, h = -ahi, -alo
                    elif op == "sin":
                        l, h = _iv_sin(alo, ahi)
                    elif op == "cos":
                        l, h = _iv_cos(alo, ahi)
                    elif op == "tanh":
                        l, h = _iv_tanh(alo, ahi)
                    elif op == "pow":
                        l, h = _iv_pow(alo, ahi, value)
                    else:
                        c = args[1]
                        blo, bhi = L[c], H[c]
                        fail = fail | F[c]
                        if op == "add":
                            l, h = _down(alo + blo), _up(ahi + bhi)
                        elif op == "sub":
                            l, h = _down(alo - bhi), _up(ahi - blo)
                        elif op == "mul":
                            l, h = _iv_mul(alo, ahi, blo, bhi)
                        else:
                            zero_in = (blo <= 0.0) & (bhi >= 0.0)
                            fail = fail | zero_in
                            q1, q2 = alo / blo, alo / bhi
                            q3, q4 = ahi / blo, ahi / bhi
                            l = _down(np.minimum(np.minimum(q1, q2), np.minimum(q3, q4)))
                            h = _up(np.maximum(np.maximum(q1, q2), np.maximum(q3, q4)))
                    if op != "neg":
                        fail = fail | ~(np.isfinite(l) & np.isfinite(h))
                L[k], H[k], F[k] = l, h, fail
        out_lo = np.stack([L[j] for j in self._out], axis=1)
        out_hi = np.stack([H[j] for j in self._out], axis=1)
        failed = np.stack([F[j] for j in self._out], axis=1)
        out_lo = np.where(failed, -np.inf, out_lo)
        out_hi = np.where(failed, np.inf, out_hi)
        return out_lo, out_hi, failed

    def point(self, X) -> np.ndarray:
        """Point values of all outputs at the rows of ``X``; shape ``(N, k)``."""
        return evaluate(self.exprs, X)


def eval_interval(e: Expr, b: Box) -> Interval:
    """Outward-rounded enclosure of ``e`` over the box ``b``.

    Raises :class:`DomainError` when a divisor's enclosure contains zero.
    """
    prog = Program([e])
    if prog.n_vars > b.dim:
        raise IndexError(f"expression uses {prog.n_vars} variables, box has {b.dim}")
    lo, hi, failed = prog.interval(b.lo[None, :], b.hi[None, :])
    if failed[0, 0]:
        raise DomainError("interval evaluation failed (division by an interval containing 0)")
    return Interval(lo[0, 0], hi[0, 0])


# ---------------------------------------------------------------------------
# symbolic manipulation

def differentiate(e: Expr, i: int) -> Expr:
    """Exact symbolic partial derivative of ``e`` with respect to ``Var(i)``."""
    memo: dict[int, Expr] = {}
    for node in _topo([e]):
        op = node.op
        if op == "const":
            d = ZERO
        elif op == "var":
            d = ONE if node.value == i else ZERO
        else:
            a = node.args[0]
            da = memo[id(a)]
            if op == "neg":
                d = -da
            elif op == "sin":
                d = cos(a) * da
            elif op == "cos":
                d = -(sin(a) * da)
            elif op == "tanh":
                # reuse the tanh node itself so the derivative shares it
                d = (ONE - node ** 2) * da
            elif op == "pow":
                k = node.value
                d = (float(k) * a ** (k - 1)) * da
            else:
                b = node.args[1]
                db = memo[id(b)]
                if op == "add":
                    d = da + db
                elif op == "sub":
                    d = da - db
                elif op == "mul":
                    d = da * b + a * db
                else:
                    d = (da * b - a * db) / b ** 2
        memo[id(node)] = d
    return memo[id(e)]


def substitute(e: Expr, mapping: Mapping[int, Expr]) -> Expr:
    """Replace ``Var(k)`` by ``mapping[k]``; other nodes are rebuilt with folding."""
    memo: dict[int, Expr] = {}
    for node in _topo([e]):
        op = node.op
        if op == "var" and node.value in mapping:
            r = _wrap(mapping[node.value])
        elif op in ("const", "var"):
            r = node
        else:
            args = [memo[id(a)] for a in node.args]
            if all(x is y for x, y in zip(args, node.args)):
                r = node
            elif op == "neg":
                r = -args[0]
            elif op == "pow":
                r = args[0] ** node.value
            elif op in _POINT_FN:
                r = {"sin": sin, "cos": cos, "tanh": tanh}[op](args[0])
            else:
                r = {"add": _add, "sub": _sub, "mul": _mul, "div": _div}[op](*args)
        memo[id(node)] = r
    return memo[id(e)]


# ---------------------------------------------------------------------------
# s-expressions

def to_sexpr(e: Expr) -> str:
    """Serialize as an s-expression, e.g. ``(add (mul 2.0 (sin (var 0))) (var 1))``.

    Shared subexpressions are written out in full at every use.
    """
    parts: list[str] = []
    stack: list = [e]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            parts.append(item)
            continue
        if item.op == "const":
            parts.append(repr(item.value))
        elif item.op == "var":
            parts.append(f"(var {item.value})")
        else:
            trailer = f" {item.value})" if item.op == "pow" else ")"
            stack.append(trailer)
            for child in reversed(item.args):
                stack.append(child)
                stack.append(" ")
            parts.append(f"({item.op}")
    return "".join(parts)


_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")


def parse_sexpr(text: str) -> Expr:
    """Inverse of :func:`to_sexpr`.  Bare numbers are constants."""
    tokens = _TOKEN.findall(text)
    if "".join(tokens) != re.sub(r"\s+", "", text):
        raise ValueError("unexpected characters in s-expression")
    pos = 0

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of s-expression")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise ValueError("unexpected ')'")
        if tok != "(":
            return const(float(tok))
        if pos >= len(tokens):
            raise ValueError("unexpected end of s-expression")
        op = tokens[pos]
        pos += 1
        args = []
        while pos < len(tokens) and tokens[pos] != ")":
            args.append(parse())
        if pos >= len(tokens):
            raise ValueError("missing ')'")
        pos += 1
        return _build(op, args)

    result = parse()
    if pos != len(tokens):
        raise ValueError("trailing tokens after s-expression")
    return result


def _int_arg(e: Expr, what: str) -> int:
    if not e.is_const or e.value != int(e.value):
        raise ValueError(f"{what} must be an integer literal")
    return int(e.value)


def _build(op: str, args: list) -> Expr:
    arity = {"var": 1, "neg": 1, "sin": 1, "cos": 1, "tanh": 1, "pow": 2,
             "add": 2, "sub": 2, "mul": 2, "div": 2}
    if op not in arity:
        raise ValueError(f"unknown operator {op!r}")
    if len(args) != arity[op]:
        raise ValueError(f"{op} takes {arity[op]} argument(s), got {len(args)}")
    if op == "var":
        return var(_int_arg(args[0], "var index"))
    if op == "pow":
        return Expr("pow", (args[0],), _int_arg(args[1], "pow exponent"))
    # build raw nodes so parse(to_sexpr(e)) round-trips structurally
    return Expr(op, tuple(args))
