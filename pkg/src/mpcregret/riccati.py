"""Riccati operator, backward passes, DARE fixed point and the delta_inf metric.

The Riccati map used everywhere is

    F_{Q,R}(P) = Q + A'PA - A'PB (R + B'PB)^{-1} B'PA,     B = B_u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT
from .errors import DivergenceError, DomainError, SolverError
from .linalg import lam_max, lam_min, opnorm, spd_power, sym


def _gain_solve(S, rhs, cond_limit, stage=None):
    """S^{-1} rhs for symmetric positive definite S via its eigendecomposition."""
    w, V = np.linalg.eigh(sym(S))
    if w[0] <= 0 or w[-1] > cond_limit * w[0]:
        raise SolverError(f"R + B_u'PB_u is numerically singular (eigenvalues {w[0]:.3e}..{w[-1]:.3e})", stage)
    return V @ ((V.T @ rhs) / w[:, None])


def _step(Q, R, P, A, B, cond_limit, stage=None):
    """One Riccati step; returns (F_{Q,R}(P), K)."""
    PA = P @ A
    S = R + B.T @ P @ B
    K = _gain_solve(S, B.T @ PA, cond_limit, stage)
    F = Q + A.T @ PA - PA.T @ B @ K
    return sym(F), K


def riccati_step(Q, R, P, sys, tol=DEFAULT):
    F, _ = _step(np.asarray(Q, float), np.atleast_2d(R), np.asarray(P, float), sys.A, sys.B_u, tol.singular_cond)
    return F


def closed_loop(sys, K):
    return sys.A - sys.B_u @ K


@dataclass(frozen=True)
class BackwardPass:
    """Value matrices and gains of a Riccati recursion.

    Covers stages ``start .. start + m`` where m = len(K): ``P[k]`` is the value
    matrix of stage ``start + k`` (the last entry is the terminal matrix) and
    ``K[k]`` the gain of stage ``start + k``.
    """

    P: np.ndarray
    K: np.ndarray
    start: int = 1
    source: str = "offline"

    @property
    def end(self):
        """Terminal stage index."""
        return self.start + len(self.K)

    def P_at(self, t):
        return self.P[t - self.start]

    def K_at(self, t):
        return self.K[t - self.start]


def riccati_recursion(Qs, Rs, terminal, sys, start=1, source="offline", tol=DEFAULT):
    """Backward pass over explicit stage weights with an arbitrary terminal matrix."""
    m = len(Rs)
    if len(Qs) != m:
        raise ValueError("Qs and Rs must have equal length")
    n, n_u = sys.n, sys.n_u
    P = np.empty((m + 1, n, n))
    K = np.empty((m, n_u, n))
    P[m] = sym(np.asarray(terminal, dtype=float))
    A, B = sys.A, sys.B_u
    for k in range(m - 1, -1, -1):
        P[k], K[k] = _step(Qs[k], Rs[k], P[k + 1], A, B, tol.singular_cond, stage=start + k)
    P.setflags(write=False)
    K.setflags(write=False)
    return BackwardPass(P, K, start, source)


def backward_pass(costs, terminal, sys, tol=DEFAULT):
    """P_T = terminal, P_t = F_{Q_t,R_t}(P_{t+1}) and the LQR gains K_t."""
    return riccati_recursion(costs.Q[:-1], costs.R, terminal, sys, 1, "offline", tol)


def solve_dare(Q, R, sys, tol=DEFAULT.dare_tol, max_iter=DEFAULT.dare_max_iter, cond_limit=DEFAULT.singular_cond):
    """Fixed point of F_{Q,R} by plain iteration started at P = Q.

    Stops once ||F(P) - P|| <= tol * max(1, ||P||). Failure to converge is
    reported as DivergenceError, which for a stabilizable pair does not happen.
    """
    Q = sym(np.atleast_2d(np.asarray(Q, dtype=float)))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    A, B = sys.A, sys.B_u
    P = Q
    for it in range(max_iter):
        F, _ = _step(Q, R, P, A, B, cond_limit)
        if not np.all(np.isfinite(F)) or np.max(np.abs(F)) > 1e150:
            raise DivergenceError(f"DARE iteration blew up after {it + 1} steps; (A, B_u) not stabilizable?")
        if opnorm(F - P) <= tol * max(1.0, opnorm(P)):
            return F
        P = F
    raise DivergenceError(f"DARE iteration did not converge in {max_iter} steps; (A, B_u) not stabilizable?")


def delta_inf(P, Pbar, floor=DEFAULT.eig_floor):
    """||log(P^{-1/2} Pbar P^{-1/2})||: the largest |log| eigenvalue of the congruence."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Pbar = np.atleast_2d(np.asarray(Pbar, dtype=float))
    if lam_min(Pbar) <= 0:
        raise DomainError("delta_inf needs positive definite arguments")
    root_inv = spd_power(P, -0.5)
    w = np.linalg.eigvalsh(sym(root_inv @ Pbar @ root_inv))
    w = np.maximum(w, floor)
    return float(np.max(np.abs(np.log(w))))


@dataclass(frozen=True)
class StabilityConstants:
    P_max: np.ndarray
    tau: float
    rho: float
    gamma: float
    lam_max_P: float
    lam_min_Q: float
    lam_min_R: float

    def gain_bound(self, sys):
        """tau ||B_u|| lambda_max(P_max) / lambda_min(R_min)."""
        return self.tau * opnorm(sys.B_u) * self.lam_max_P / self.lam_min_R

    def value_gap_bound(self, k):
        """gamma^k lambda_max(P_max)^2 / lambda_min(Q_min)."""
        return self.gamma**k * self.lam_max_P**2 / self.lam_min_Q


def stability_constants(sys, bounds, P_max=None, tol=DEFAULT):
    """tau, rho and gamma from P_max = DARE(Q_max, R_max) and the cost bounds."""
    if P_max is None:
        P_max = solve_dare(bounds.Q_max, bounds.R_max, sys, tol.dare_tol, tol.dare_max_iter, tol.singular_cond)
    lmP = lam_max(P_max)
    lmQ = lam_min(bounds.Q_min)
    lmR = lam_min(bounds.R_min)
    tau = math.sqrt(lmP / lmQ)
    rho = math.sqrt(max(0.0, 1.0 - lmQ / lmP))
    a = lam_max(sys.A.T @ P_max @ sys.A)
    gamma = a / (lmQ + a)
    P_max = np.array(P_max)
    P_max.setflags(write=False)
    return StabilityConstants(P_max, tau, rho, gamma, lmP, lmQ, lmR)


def explicit_constants(sys, bounds, sc):
    """Closed-form constants of the gain-difference and state-expansion bounds.

    Returns c1..c5, alpha3 (= c2) and alpha4 (= c3)::

        c1     = tau ||B_u|| lmax(P_max) / lmin(R_min)
        alpha4 = 2 ||B_u|| / lmin(R_min) * lmax(P_max)^4 / lmin(Q_min)^2
                 * (||B_u R_min^{-1} B_u'|| + 1) / (1 - gamma)
        alpha3 = ||A|| alpha4
        c5     = ||B_u R_min^{-1} B_u'|| lmax(P_max) tau^2 / (1 - rho^2)
        c4     = c5 + tau
    """
    if sc.gamma >= 1 or sc.rho >= 1:
        raise DomainError("rho and gamma must lie below 1")
    nB = opnorm(sys.B_u)
    BRB = opnorm(sys.B_u @ np.linalg.solve(bounds.R_min, sys.B_u.T))
    c1 = sc.tau * nB * sc.lam_max_P / sc.lam_min_R
    alpha4 = 2 * nB / sc.lam_min_R * sc.lam_max_P**4 / sc.lam_min_Q**2 * (BRB + 1) / (1 - sc.gamma)
    alpha3 = opnorm(sys.A) * alpha4
    c5 = BRB * sc.lam_max_P * sc.tau**2 / (1 - sc.rho**2)
    c4 = c5 + sc.tau
    return {"c1": c1, "c2": alpha3, "c3": alpha4, "c4": c4, "c5": c5, "alpha3": alpha3, "alpha4": alpha4}


def metric_diameter(L, U):
    """log(lmax(U) / lmin(L)): bound on delta_inf between matrices in [L, U]."""
    return math.log(lam_max(U) / lam_min(L))


def norm_from_metric_bound(U, c, delta):
    """lmax(U) (e^c - 1)/c * delta: norm-gap bound when delta_inf <= c."""
    factor = 1.0 if c == 0 else math.expm1(c) / c
    return lam_max(U) * factor * delta
