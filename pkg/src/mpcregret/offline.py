"""Hindsight-optimal controller and two independent oracles for it.

The optimal action at stage t is

    u_t = -K_t x_t - sum_{i=t}^{T-1} K_t^{d,i} B_d d_i,
    K_t^{d,i} = (R_t + B_u'P_{t+1}B_u)^{-1} B_u' Phi(i+1, t+1)' P_{i+1},

with Phi the closed-loop transition of the offline gains. ``qp_oracle``
minimises the total cost directly over the stacked inputs and
``build_lifted`` runs the block value-function recursion on the lifted
(state, future disturbances) vector; both are used only for cross-checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .config import DEFAULT
from .errors import DimensionError, SizeCapError
from .riccati import _gain_solve, backward_pass, closed_loop


@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray            # (T, n)
    u: np.ndarray            # (T-1, n_u)
    stage_costs: np.ndarray  # (T,)

    @property
    def J(self):
        return float(np.sum(self.stage_costs))

    @property
    def T(self):
        return self.x.shape[0]


def stage_costs(costs, x, u):
    c = np.empty(costs.T)
    for t in range(costs.T - 1):
        c[t] = x[t] @ costs.Q[t] @ x[t] + u[t] @ costs.R[t] @ u[t]
    c[-1] = x[-1] @ costs.Q[-1] @ x[-1]
    return c


def simulate(sys, costs, trace, policy):
    """Roll out ``policy(t, x) -> u`` under the true disturbances."""
    _check_trace(sys, costs, trace)
    T = costs.T
    x = np.empty((T, sys.n))
    u = np.empty((T - 1, sys.n_u))
    x[0] = trace.x1
    for t in range(1, T):
        u[t - 1] = policy(t, x[t - 1])
        x[t] = sys.step(x[t - 1], u[t - 1], trace.d[t - 1])
    return Trajectory(x, u, stage_costs(costs, x, u))


def _check_trace(sys, costs, trace):
    if trace.T != costs.T:
        raise DimensionError("d", f"trace covers T={trace.T}, costs cover T={costs.T}")
    if trace.d.shape[1] != sys.n_d:
        raise DimensionError("d", f"disturbances have dimension {trace.d.shape[1]}, B_d expects {sys.n_d}")
    if trace.x1.shape[0] != sys.n:
        raise DimensionError("x1", f"initial state has dimension {trace.x1.shape[0]}, system has n={sys.n}")


@dataclass(frozen=True)
class OfflinePolicy:
    """Offline LQR pass plus the disturbance feedforward gains K_t^{d,i}.

    ``Kd[t - 1, i - 1]`` holds K_t^{d,i} (zero for i < t).
    """

    sys: object
    costs: object
    pass_: object
    Kd: np.ndarray
    _phi_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def T(self):
        return self.costs.T

    def K(self, t):
        return self.pass_.K_at(t)

    def P(self, t):
        return self.pass_.P_at(t)

    def Kd_at(self, t, i):
        if not (1 <= t <= i <= self.T - 1):
            raise IndexError(f"K^{{d,{i}}}_{t} undefined for T={self.T}")
        return self.Kd[t - 1, i - 1]

    def phi(self, t, t0):
        """Phi(t, t0) = (A - B_u K_{t-1}) ... (A - B_u K_{t0}), identity when t == t0."""
        if not (1 <= t0 <= t <= self.T):
            raise IndexError(f"Phi({t}, {t0}) undefined for T={self.T}")
        cache = self._phi_cache
        s = t
        while s > t0 and (s, t0) not in cache:
            s -= 1
        M = cache.get((s, t0))
        if M is None:
            M = np.eye(self.sys.n)
            M.setflags(write=False)
            cache[(s, t0)] = M
        for r in range(s + 1, t + 1):
            M = closed_loop(self.sys, self.K(r - 1)) @ M
            M.setflags(write=False)
            cache[(r, t0)] = M
        return M

    def feedforward(self, trace):
        """sum_{i >= t} K_t^{d,i} B_d d_i for every stage t (shape (T-1, n_u))."""
        w = trace.d @ self.sys.B_d.T  # B_d d_i, shape (T-1, n)
        return np.einsum("tiun,in->tu", self.Kd, w)

    def action(self, t, x, trace, ff=None):
        """Optimal action at stage t from an arbitrary state x."""
        ff_t = self.feedforward(trace)[t - 1] if ff is None else ff[t - 1]
        return -self.K(t) @ x - ff_t


def build_offline_policy(sys, costs, tol=DEFAULT):
    pass_ = backward_pass(costs, costs.Q[-1], sys, tol)
    T, n, n_u = costs.T, sys.n, sys.n_u
    B = sys.B_u
    Kd = np.zeros((T - 1, T - 1, n_u, n))
    X = None  # X_t^{d,i} = Phi(i+1, t+1)' P_{i+1} for i = t..T-1
    for t in range(T - 1, 0, -1):
        head = pass_.P_at(t + 1)[None]
        if X is None:
            X = head
        else:
            Acl = closed_loop(sys, pass_.K_at(t + 1))
            X = np.concatenate([head, np.einsum("ba,kbc->kac", Acl, X)])
        S = costs.R[t - 1] + B.T @ pass_.P_at(t + 1) @ B
        SinvB = _gain_solve(S, B.T, tol.singular_cond, stage=t)
        Kd[t - 1, t - 1 :] = np.einsum("ua,kab->kub", SinvB, X)
    Kd.setflags(write=False)
    return OfflinePolicy(sys, costs, pass_, Kd)


def optimal_rollout(policy, trace):
    ff = policy.feedforward(trace)
    return simulate(policy.sys, policy.costs, trace, lambda t, x: -policy.K(t) @ x - ff[t - 1])


def write_trajectory_csv(path, traj):
    n = traj.x.shape[1]
    n_u = traj.u.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(n_u)] + ["stage_cost"])
        for t in range(1, traj.T + 1):
            u = traj.u[t - 1] if t < traj.T else [None] * n_u
            w.writerow([t] + [format(v, ".17g") for v in traj.x[t - 1]]
                       + ["" if v is None else format(v, ".17g") for v in u]
                       + [format(traj.stage_costs[t - 1], ".17g")])


# -- direct quadratic minimisation ------------------------------------------

def _stacked_dynamics(A, Bu, Bd, T):
    """Matrices with x_stack = Sx x1 + Su u_stack + Sd d_stack for stages 1..T."""
    n, n_u, n_d = A.shape[0], Bu.shape[1], Bd.shape[1]
    powers = [np.eye(n)]
    for _ in range(T - 1):
        powers.append(A @ powers[-1])
    Sx = np.vstack(powers)
    Su = np.zeros((T * n, (T - 1) * n_u))
    Sd = np.zeros((T * n, (T - 1) * n_d))
    for t in range(1, T):          # row block of x_{t+1}
        for s in range(1, t + 1):  # input at stage s reaches x_{t+1} through A^{t-s}
            Apow = powers[t - s]
            Su[t * n : (t + 1) * n, (s - 1) * n_u : s * n_u] = Apow @ Bu
            Sd[t * n : (t + 1) * n, (s - 1) * n_d : s * n_d] = Apow @ Bd
    return Sx, Su, Sd


def qp_oracle(sys, costs, trace, max_vars=DEFAULT.qp_max_vars):
    """Minimise the total cost over all inputs via state elimination.

    Returns (u_star with shape (T-1, n_u), J_star).
    """
    _check_trace(sys, costs, trace)
    T = costs.T
    nvars = (T - 1) * sys.n_u
    if nvars > max_vars:
        raise SizeCapError(f"{nvars} decision variables exceed the cap of {max_vars}")
    Sx, Su, Sd = _stacked_dynamics(sys.A, sys.B_u, sys.B_d, T)
    Qb = scipy.linalg.block_diag(*costs.Q)
    Rb = scipy.linalg.block_diag(*costs.R)
    free = Sx @ trace.x1 + Sd @ trace.d.ravel()
    H = Su.T @ Qb @ Su + Rb
    g = Su.T @ Qb @ free
    u = scipy.linalg.solve(0.5 * (H + H.T), -g, assume_a="pos")
    x = free + Su @ u
    J = float(x @ Qb @ x + u @ Rb @ u)
    return u.reshape(T - 1, sys.n_u), J


# -- lifted value-function form ---------------------------------------------

def stacked_powers(A, k):
    """[I; A; ...; A^{k-1}]."""
    n = A.shape[0]
    out = np.empty((k * n, n))
    M = np.eye(n)
    for j in range(k):
        out[j * n : (j + 1) * n] = M
        M = A @ M
    return out


@dataclass(frozen=True)
class LiftedSolution:
    """Block value matrices V_t acting on y_t = (x, A x + B_d d_t, ...).

    ``V[t - 1]`` is V_t with size (T - t + 1) n; ``G[t - 1]`` the lifted gain of
    stage t < T; ``Y[t - 1] = V_t [I; A; ...; A^{T-t}]``.
    """

    sys: object
    costs: object
    V: list
    G: list
    Y: list

    @property
    def T(self):
        return self.costs.T

    def stacked(self, t):
        return stacked_powers(self.sys.A, self.T - t + 1)

    def P(self, t):
        Ast = self.stacked(t)
        return Ast.T @ self.V[t - 1] @ Ast

    def lifted_state(self, t, x, trace):
        """y_t^{t:T}(x): y^1 = x, y^{k+1} = A y^k + B_d d_{t+k-1}."""
        ys = [np.asarray(x, dtype=float)]
        for k in range(1, self.T - t + 1):
            ys.append(self.sys.A @ ys[-1] + self.sys.B_d @ trace.d[t + k - 2])
        return np.concatenate(ys)

    def value(self, t, x, trace):
        y = self.lifted_state(t, x, trace)
        return float(y @ self.V[t - 1] @ y)

    def action(self, t, x, trace):
        y = self.lifted_state(t, x, trace)
        return -self.G[t - 1] @ y[self.sys.n :]


def build_lifted(sys, costs, max_dim=DEFAULT.lifted_max_dim):
    T, n = costs.T, sys.n
    if T * n > max_dim:
        raise SizeCapError(f"lifted dimension {T * n} exceeds the cap of {max_dim}")
    B = sys.B_u
    V = [None] * T
    G = [None] * (T - 1)
    V[T - 1] = np.array(costs.Q[-1])
    for t in range(T - 1, 0, -1):
        X = V[t]  # V_{t+1}
        AB = stacked_powers(sys.A, T - t) @ B
        S = costs.R[t - 1] + AB.T @ X @ AB
        G[t - 1] = np.linalg.solve(S, AB.T @ X)
        f = X - X @ AB @ G[t - 1]
        f = 0.5 * (f + f.T)
        m = (T - t + 1) * n
        Vt = np.zeros((m, m))
        Vt[:n, :n] = costs.Q[t - 1]
        Vt[n:, n:] = f
        V[t - 1] = Vt
    Y = [V[t - 1] @ stacked_powers(sys.A, T - t + 1) for t in range(1, T + 1)]
    return LiftedSolution(sys, costs, V, G, Y)


def stacked_closed_loop_weights(policy, t):
    """[Q_t; Q_{t+1}(A - B_u K_t); ...; Q_T (A - B_u K_{T-1}) ... (A - B_u K_t)]."""
    T = policy.T
    return np.vstack([policy.costs.Q[s - 1] @ policy.phi(s, t) for s in range(t, T + 1)])
