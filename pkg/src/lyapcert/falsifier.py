"""Delta-complete branch-and-prune search for Lyapunov counterexamples.

A constraint is a conjunction of clauses; a clause is a disjunction of
atoms ``expr <= bound`` or ``expr >= bound``.  Boxes are pruned when interval
evaluation refutes every atom of some clause.  A box that survives down to
``w_min`` is reported as a delta-sat witness if one of its sample points
satisfies the delta-weakened constraint; otherwise it is split further.
An exhausted worklist proves the constraint unsatisfiable.

Only atoms flagged ``weaken`` are relaxed by ``delta``; the epsilon-ball and
domain atoms are always checked exactly, so witnesses lie in the domain and
outside the epsilon-ball.
"""
from __future__ import annotations

import csv
import itertools
import logging
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Box, Expr, Program
from .network import LinearController, LyapunovNet, SystemSpec, compile_lieV, compile_V

__all__ = [
    "Atom", "Budget", "BudgetExhausted", "Unsat", "DeltaSat", "FalsificationProblem",
    "ProblemError", "max_delta", "solve", "check", "verify_lyapunov", "lyapunov_problem",
    "write_counterexample_log", "norm2",
]

log = logging.getLogger(__name__)


class ProblemError(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    """Neither outcome could be established within the box or time budget."""

    def __init__(self, msg, boxes=0, elapsed=0.0):
        super().__init__(msg)
        self.boxes = boxes
        self.elapsed = elapsed


@dataclass(frozen=True)
class Budget:
    max_boxes: int = 10 ** 7
    max_seconds: float = 1800.0


@dataclass(frozen=True)
class Atom:
    expr: Expr
    sense: str
    bound: float = 0.0
    weaken: bool = True
    label: str = ""

    def __post_init__(self):
        if self.sense not in ("<=", ">="):
            raise ValueError("sense must be '<=' or '>='")


@dataclass(frozen=True)
class Unsat:
    boxes: int = 0
    elapsed: float = 0.0

    @property
    def is_unsat(self) -> bool:
        return True


@dataclass(frozen=True)
class DeltaSat:
    witness: np.ndarray
    box: Box
    violated: str
    boxes: int = 0
    elapsed: float = 0.0

    @property
    def is_unsat(self) -> bool:
        return False


def max_delta(epsilon: float) -> float:
    """Largest admissible delta for a given epsilon.

    ``epsilon`` bounds the squared norm, so its length scale is
    ``sqrt(epsilon)``; delta must be an order of magnitude below that.  A
    small slack absorbs decimal round-off (``sqrt(0.01) / 10``).
    """
    return float(np.sqrt(epsilon)) / 10.0 * (1.0 + 1e-12)


def norm2(n: int) -> Expr:
    """``sum_i x_i**2`` over the first ``n`` variables."""
    return ex.sum_exprs(ex.var(i) ** 2 for i in range(n))


def _corner_offsets(n: int) -> np.ndarray:
    if n > 4:
        return np.zeros((1, n))
    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=n)))
    return np.vstack([np.zeros((1, n)), corners])


class _Search:
    def __init__(self, clauses, domain: Box, delta, w_min, budget, max_batch=4096):
        self.clauses = [list(c) for c in clauses]
        self.atoms = [a for c in self.clauses for a in c]
        self.prog = Program([a.expr for a in self.atoms])
        if self.prog.n_vars > domain.dim:
            raise ProblemError("constraint uses variables outside the domain")
        self.domain = domain
        self.n = domain.dim
        self.delta = float(delta)
        self.w_min = float(w_min)
        self.budget = budget
        self.max_batch = max_batch
        self.sense_le = np.array([a.sense == "<=" for a in self.atoms])
        self.bounds = np.array([a.bound for a in self.atoms], dtype=float)
        slack = np.array([self.delta if a.weaken else 0.0 for a in self.atoms])
        # delta-weakened thresholds for the point check
        self.point_bounds = np.where(self.sense_le, self.bounds + slack, self.bounds - slack)
        self.clause_index = []
        k = 0
        for c in self.clauses:
            self.clause_index.append(list(range(k, k + len(c))))
            k += len(c)
        self.offsets = _corner_offsets(self.n)
        self.boxes = 0
        self.t0 = time.perf_counter()
        self.lock = threading.Lock()
        self.found = threading.Event()

    # -- per-batch steps ---------------------------------------------------
    def prune_mask(self, lo, hi) -> np.ndarray:
        L, H, _ = self.prog.interval(lo, hi)
        refuted = np.where(self.sense_le, L > self.bounds, H < self.bounds)
        pruned = np.zeros(len(lo), dtype=bool)
        for idx in self.clause_index:
            pruned |= np.all(refuted[:, idx], axis=1)
        return pruned

    def point_ok(self, P) -> np.ndarray:
        vals = self.prog.point(P)
        with np.errstate(invalid="ignore"):
            sat = np.where(self.sense_le, vals <= self.point_bounds, vals >= self.point_bounds)
        sat &= np.isfinite(vals)
        ok = np.ones(len(P), dtype=bool)
        for idx in self.clause_index:
            ok &= np.any(sat[:, idx], axis=1)
        ok &= np.all((P >= self.domain.lo) & (P <= self.domain.hi), axis=1)
        return ok

    def describe(self, w) -> str:
        vals = self.prog.point(w[None, :])[0]
        hits = [a.label for a, v, pb, le in zip(self.atoms, vals, self.point_bounds, self.sense_le)
                if a.weaken and a.label and (v <= pb if le else v >= pb)]
        return "both" if len(hits) > 1 else (hits[0] if hits else "")

    def _charge(self, k: int):
        with self.lock:
            self.boxes += k
            boxes = self.boxes
        if boxes > self.budget.max_boxes:
            raise BudgetExhausted(f"box budget {self.budget.max_boxes} exceeded",
                                  boxes, time.perf_counter() - self.t0)
        if time.perf_counter() - self.t0 > self.budget.max_seconds:
            raise BudgetExhausted(f"time budget {self.budget.max_seconds}s exceeded",
                                  boxes, time.perf_counter() - self.t0)

    def step(self, lo, hi):
        """Process one batch; returns ``(witness_or_None, children_lo, children_hi)``."""
        self._charge(len(lo))
        keep = ~self.prune_mask(lo, hi)
        lo, hi = lo[keep], hi[keep]
        if not len(lo):
            return None, None, None
        widths = hi - lo
        small = widths.max(axis=1) <= self.w_min
        if small.any():
            slo, shi = lo[small], hi[small]
            mid = 0.5 * (slo + shi)
            span = shi - slo
            cand = (mid[:, None, :] + self.offsets[None, :, :] * span[:, None, :])
            k = cand.shape[1]
            ok = self.point_ok(cand.reshape(-1, self.n)).reshape(-1, k)
            hit = np.flatnonzero(ok.any(axis=1))
            if len(hit):
                b = hit[0]
                w = cand[b, int(np.argmax(ok[b]))]
                return (w, Box.from_bounds(slo[b], shi[b])), None, None
        dim = np.argmax(widths, axis=1)
        rows = np.arange(len(lo))
        mid = 0.5 * (lo[rows, dim] + hi[rows, dim])
        stuck = (mid <= lo[rows, dim]) | (mid >= hi[rows, dim])
        if stuck.any():
            raise BudgetExhausted("box reached floating-point resolution undecided",
                                  self.boxes, time.perf_counter() - self.t0)
        left_hi = hi.copy()
        left_hi[rows, dim] = mid
        right_lo = lo.copy()
        right_lo[rows, dim] = mid
        return None, np.vstack([lo, right_lo]), np.vstack([left_hi, hi])

    def run(self, stack):
        """Depth-first over batches from ``stack`` (list of (lo, hi))."""
        while stack:
            if self.found.is_set():
                return None
            lo, hi = stack.pop()
            if len(lo) > self.max_batch:
                stack.append((lo[self.max_batch:], hi[self.max_batch:]))
                lo, hi = lo[:self.max_batch], hi[:self.max_batch]
            hit, clo, chi = self.step(lo, hi)
            if hit is not None:
                self.found.set()
                return hit
            if clo is not None:
                stack.append((clo, chi))
        return None


def solve(clauses: Sequence[Sequence[Atom]], domain: Box, delta: float,
          w_min: float | None = None, budget: Budget = Budget(), workers: int = 1):
    """Decide the conjunction of ``clauses`` over ``domain``.

    Returns :class:`Unsat` or :class:`DeltaSat`; raises
    :class:`BudgetExhausted`.  The explored box tree does not depend on
    ``workers``, so an Unsat answer (and its box count) is reproducible; with
    several workers the particular DeltaSat witness may differ between runs.
    """
    if not delta > 0:
        raise ProblemError("delta must be positive")
    w_min = delta / 4.0 if w_min is None else float(w_min)
    search = _Search(clauses, domain, delta, w_min, budget)
    root = [(domain.lo[None, :].copy(), domain.hi[None, :].copy())]
    if workers <= 1:
        hit = search.run(root)
    else:
        hit = _run_parallel(search, root, workers)
    elapsed = time.perf_counter() - search.t0
    if hit is None:
        return Unsat(search.boxes, elapsed)
    w, box = hit
    return DeltaSat(np.array(w), box, search.describe(w), search.boxes, elapsed)


def _run_parallel(search: _Search, root, workers: int):
    # expand the top of the tree serially, then hand whole subtrees to workers
    frontier_lo, frontier_hi = root[0]
    target = 4 * workers
    while 0 < len(frontier_lo) < target:
        hit, clo, chi = search.step(frontier_lo, frontier_hi)
        if hit is not None:
            return hit
        if clo is None:
            return None
        frontier_lo, frontier_hi = clo, chi
    stacks = [[] for _ in range(workers)]
    for k in range(len(frontier_lo)):
        stacks[k % workers].append((frontier_lo[k:k + 1], frontier_hi[k:k + 1]))
    for s in stacks:
        s.reverse()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(search.run, s) for s in stacks]
        results, error = [], None
        for fut in futures:
            try:
                results.append(fut.result())
            except BudgetExhausted as err:
                error = err
                search.found.set()
    hits = [r for r in results if r is not None]
    if hits:
        return hits[0]
    if error is not None:
        raise error
    return None


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FalsificationProblem:
    """``||x||^2 >= eps  and  (V <= 0  or  LieV >= relaxation)`` over the domain.

    With ``radius`` set, the ball constraint ``||x||^2 <= radius^2`` is added
    to the bounding ``domain`` box.
    """

    V: Expr
    lieV: Expr
    domain: Box
    epsilon: float
    delta: float
    radius: float | None = None
    relaxation: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ProblemError("epsilon must be positive")
        if not self.delta > 0:
            raise ProblemError("delta must be positive")
        if self.delta > max_delta(self.epsilon):
            raise ProblemError(f"delta={self.delta} must be <= sqrt(epsilon)/10 = "
                               f"{max_delta(self.epsilon):.6g}")
        scale = self.radius if self.radius is not None else float(np.min(self.domain.widths) / 2)
        if np.sqrt(self.epsilon) >= min(1.0, scale):
            warnings.warn("sqrt(epsilon) is not small compared with the domain; "
                          "the epsilon-ball excludes most of it", stacklevel=2)

    def clauses(self) -> list:
        n = self.domain.dim
        r2 = norm2(n)
        cl = [[Atom(r2, ">=", self.epsilon, weaken=False, label="eps")]]
        if self.radius is not None:
            cl.append([Atom(r2, "<=", self.radius ** 2, weaken=False, label="ball")])
        cl.append([Atom(self.V, "<=", 0.0, label="V<=0"),
                   Atom(self.lieV, ">=", self.relaxation, label="LieV>=0")])
        return cl


def check(p: FalsificationProblem, budget: Budget = Budget(), workers: int = 1,
          w_min: float | None = None):
    """Delta-complete check of the falsification constraint."""
    return solve(p.clauses(), p.domain, p.delta, w_min, budget, workers)


def lyapunov_problem(net: LyapunovNet, ctrl: LinearController, system: SystemSpec,
                     epsilon: float, delta: float, relaxation: float = 0.0) -> FalsificationProblem:
    V = compile_V(net)
    lieV = compile_lieV(net, system, ctrl, V)
    return FalsificationProblem(V, lieV, system.domain_box(), epsilon, delta,
                                system.radius, relaxation)


def verify_lyapunov(net, ctrl, system, epsilon, delta, budget: Budget = Budget(),
                    workers: int = 1, relaxation: float = 0.0):
    """Build the falsification constraint for ``(net, ctrl)`` and :func:`check` it."""
    return check(lyapunov_problem(net, ctrl, system, epsilon, delta, relaxation),
                 budget, workers)


def write_counterexample_log(path, rows) -> Path:
    """Rows are ``(cegis_iteration, witness, violated)``."""
    path = Path(path)
    rows = list(rows)
    n = len(rows[0][1]) if rows else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cegis_iteration", *[f"x{i}" for i in range(n)], "violated"])
        for it, x, violated in rows:
            w.writerow([it, *[repr(float(v)) for v in x], violated])
    return path
