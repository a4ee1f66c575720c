"""Discrete-time LQR ground truth and the RMSE metrics used for validation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, NotStabilizableError


@dataclass
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64, ndmin=2)
        self.B = np.array(self.B, dtype=np.float64, ndmin=2)
        self.M = np.array(self.M, dtype=np.float64, ndmin=2)
        self.R = np.array(self.R, dtype=np.float64, ndmin=2)
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.M.shape != (n, n) or self.R.shape != (m, m):
            raise ConfigError("LQR matrices are not conformable")

    def discounted(self, gamma: float) -> "LqrProblem":
        """Equivalent undiscounted problem for discount ``gamma``: (sqrt(g) A, sqrt(g) B)."""
        g = np.sqrt(gamma)
        return LqrProblem(g * self.A, g * self.B, self.M, self.R)


@dataclass
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int = 0

    def closed_loop(self, prob: LqrProblem) -> np.ndarray:
        return prob.A - prob.B @ self.K


def riccati_step(P, A, B, M, R):
    """One application of the Riccati map; returns (P_next, K)."""
    BtP = B.T @ P
    G = cho_factor(R + BtP @ B)
    K = cho_solve(G, BtP @ A)
    P_next = M + A.T @ P @ A - (A.T @ P @ B) @ K
    return 0.5 * (P_next + P_next.T), K


def dare_residual(prob: LqrProblem, P) -> float:
    P_next, _ = riccati_step(P, prob.A, prob.B, prob.M, prob.R)
    return float(np.max(np.abs(P - P_next)))


def solve_dare(prob: LqrProblem, tol: float = 1e-12, max_iter: int = 200_000) -> LqrSolution:
    """Fixed-point Riccati iteration from P_0 = M.

    Stops when the sup-norm step is at most ``tol * max(1, |P|_inf)``; the
    scaling keeps the test attainable in float64 when P has large entries.
    """
    A, B, M, R = prob.A, prob.B, prob.M, prob.R
    P = 0.5 * (M + M.T)
    for k in range(1, max_iter + 1):
        P_next, K = riccati_step(P, A, B, M, R)
        if not np.all(np.isfinite(P_next)):
            raise NotStabilizableError(f"Riccati iteration diverged after {k} steps")
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if delta <= tol * max(1.0, float(np.max(np.abs(P)))):
            _, K = riccati_step(P, A, B, M, R)
            return LqrSolution(P, K, k)
    raise NotStabilizableError(f"Riccati iteration did not converge in {max_iter} steps")


def solve_discounted(prob: LqrProblem, gamma: float = 1.0, **kw) -> LqrSolution:
    """Optimal value matrix and gain for sum_t gamma^t (x'Mx + u'Ru)."""
    return solve_dare(prob.discounted(gamma), **kw)


def spectral_radius(X) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(X))))


def param_rmse(X, X_ref) -> float:
    X, X_ref = np.asarray(X, dtype=np.float64), np.asarray(X_ref, dtype=np.float64)
    if X.shape != X_ref.shape:
        raise ConfigError(f"shape mismatch {X.shape} vs {X_ref.shape}")
    return float(np.sqrt(np.mean((X - X_ref) ** 2)))


def closed_loop_rmse(A, B, K, A_ref, B_ref, K_ref) -> float:
    """Entrywise RMSE between A - BK and A_ref - B_ref K_ref."""
    A, B, K = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (A, B, K))
    A_ref, B_ref, K_ref = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (A_ref, B_ref, K_ref))
    return param_rmse(A - B @ K, A_ref - B_ref @ K_ref)


def laplacian_system(n: int, diag: float = 1.01, off: float = 0.01):
    """Tridiagonal unstable Laplacian dynamics with identity input matrix."""
    A = diag * np.eye(n) + off * (np.eye(n, k=1) + np.eye(n, k=-1))
    return A, np.eye(n)
