"""LQR initialization: linearize at the origin and solve the CARE.

The Riccati equation ``A'P + PA - P B R^-1 B' P + Q = 0`` is solved with the
scaled matrix-sign Newton iteration on the Hamiltonian, followed by a
Newton-Kleinman polishing step.  Stability is checked with a Routh-Hurwitz
table on the characteristic polynomial rather than an eigensolver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .network import LinearController, SystemSpec

__all__ = [
    "LinearizedSystem", "LqrSolution", "linearize", "solve_care", "hurwitz_check",
    "charpoly", "lqr_controller", "care_residual",
    "OriginSingularity", "NonEquilibrium", "NotStabilizable", "IllConditioned",
]


class OriginSingularity(ArithmeticError):
    pass


class NonEquilibrium(ValueError):
    pass


class NotStabilizable(ArithmeticError):
    pass


class IllConditioned(ArithmeticError):
    pass


@dataclass(frozen=True)
class LinearizedSystem:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def controller(self) -> LinearController:
        """Feedback ``u = -K x`` as a :class:`LinearController`."""
        return LinearController(-self.K)

    def quadratic(self):
        """``x' P x`` as an Expr."""
        n = self.P.shape[0]
        xs = [ex.var(i) for i in range(n)]
        return ex.sum_exprs(
            float(self.P[i, j]) * (xs[i] ** 2 if i == j else xs[i] * xs[j])
            for i in range(n) for j in range(n)
        )


def linearize(system: SystemSpec, tol: float = 1e-9) -> LinearizedSystem:
    """Jacobians of the open-loop dynamics at ``x = 0, u = 0``."""
    n, m = system.n, system.m
    origin = np.zeros(n + m)
    try:
        f0 = np.array([ex.eval_point(fi, origin) for fi in system.dynamics])
    except (ex.DivisionByZero, ex.NonFiniteResult) as err:
        raise OriginSingularity(str(err)) from err
    if np.max(np.abs(f0), initial=0.0) > tol:
        raise NonEquilibrium(f"f(0, 0) = {f0.tolist()} is not zero")
    J = np.zeros((n, n + m))
    for i, fi in enumerate(system.dynamics):
        for j in range(n + m):
            try:
                J[i, j] = ex.eval_point(ex.differentiate(fi, j), origin)
            except (ex.DivisionByZero, ex.NonFiniteResult) as err:
                raise OriginSingularity(str(err)) from err
    return LinearizedSystem(J[:, :n], J[:, n:])


def charpoly(M) -> np.ndarray:
    """Characteristic polynomial coefficients (highest degree first), Faddeev-LeVerrier."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(M)
    I = np.eye(n)
    for k in range(1, n + 1):
        Mk = M @ Mk + coeffs[-1] * I
        coeffs.append(-np.trace(M @ Mk) / k)
    return np.array(coeffs)


def hurwitz_check(M) -> bool:
    """True iff every eigenvalue of ``M`` has negative real part.

    Decided from the first column of the Routh table; any zero or sign change
    in that column means not strictly Hurwitz.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    p = charpoly(M)
    n = len(p) - 1
    scale = np.max(np.abs(p))
    tol = 1e-12 * scale
    if np.any(p <= tol):
        # a stable polynomial with positive leading coefficient has all
        # coefficients strictly positive
        return False
    row0 = list(p[0::2])
    row1 = list(p[1::2])
    width = len(row0)
    row1 += [0.0] * (width - len(row1))
    first = [row0[0], row1[0]]
    for _ in range(n - 1):
        if abs(row1[0]) <= tol:
            return False
        nxt = [
            (row1[0] * row0[j + 1] - row0[0] * row1[j + 1]) / row1[0]
            for j in range(width - 1)
        ] + [0.0]
        row0, row1 = row1, nxt
        first.append(row1[0])
    return all(c > tol for c in first)


def _matrix_sign(H, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    Z = np.array(H, dtype=float)
    N = Z.shape[0]
    for _ in range(max_iter):
        try:
            Zinv = np.linalg.solve(Z, np.eye(N))
        except np.linalg.LinAlgError as err:
            raise NotStabilizable("Hamiltonian has eigenvalues on the imaginary axis") from err
        det = abs(np.linalg.det(Z))
        c = det ** (-1.0 / N) if det > 0 and np.isfinite(det) else 1.0
        Znew = 0.5 * (c * Z + Zinv / c)
        if np.linalg.norm(Znew - Z, 1) <= tol * np.linalg.norm(Znew, 1):
            return Znew
        Z = Znew
    raise NotStabilizable("matrix sign iteration did not converge")


def _lyap(Acl, C) -> np.ndarray:
    """Solve ``Acl' X + X Acl + C = 0`` via the Kronecker form (small n)."""
    n = Acl.shape[0]
    I = np.eye(n)
    L = np.kron(I, Acl.T) + np.kron(Acl.T, I)
    X = np.linalg.solve(L, -C.reshape(-1, order="F")).reshape((n, n), order="F")
    return 0.5 * (X + X.T)


def care_residual(A, B, Q, R, P) -> np.ndarray:
    return A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q


def solve_care(A, B, Q=None, R=None) -> LqrSolution:
    """Stabilizing solution of the continuous algebraic Riccati equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("R must be positive definite")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    if np.linalg.cond(R) > 1e12:
        raise IllConditioned("R is ill-conditioned")

    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    W = _matrix_sign(H)
    I = np.eye(n)
    lhs = np.vstack([W[:n, n:], W[n:, n:] + I])
    rhs = -np.vstack([W[:n, :n] + I, W[n:, :n]])
    P, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise NotStabilizable("non-finite Riccati solution")

    for _ in range(3):
        K = np.linalg.solve(R, B.T @ P)
        Acl = A - B @ K
        if not hurwitz_check(Acl):
            break
        P_new = _lyap(Acl, Q + K.T @ R @ K)
        if np.max(np.abs(care_residual(A, B, Q, R, P_new))) > np.max(np.abs(care_residual(A, B, Q, R, P))):
            break
        P = P_new

    K = np.linalg.solve(R, B.T @ P)
    if not hurwitz_check(A - B @ K):
        raise NotStabilizable("closed loop A - BK is not Hurwitz; (A, B) not stabilizable?")
    res = np.max(np.abs(care_residual(A, B, Q, R, P)))
    if res > 1e-6 * (1.0 + np.max(np.abs(Q))) * max(1.0, np.max(np.abs(P))):
        raise IllConditioned(f"Riccati residual {res:.3e} too large")
    return LqrSolution(P, K, Q, R)


def lqr_controller(system: SystemSpec, Q=None, R=None) -> tuple[LinearController, LqrSolution]:
    """Linearize ``system`` and return the LQR feedback ``u = -K x``."""
    lin = linearize(system)
    sol = solve_care(lin.A, lin.B, Q, R)
    return sol.controller(), sol
