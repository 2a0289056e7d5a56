"""W-step MPC with terminal cost P_max, in closed-form gain representation.

At a windowed stage t (t <= T - W - 1) the MPC problem

    min  sum_{k=t}^{t+W} x_k'Q_k x_k + u_k'R_k u_k + x_{t+W+1}' P_max x_{t+W+1}
    s.t. x_{k+1} = A x_k + B_u u_k + B_d d_{k|t}

is itself an LQR problem, so its first input is

    u_t = -Kbar_t x_t - sum_{i=t}^{t+W} Kbar_t^{d,i} B_d d_{i|t}

with gains from a local Riccati pass over {Q_i, R_i}_{i=t}^{t+W} ending at
P_max. Near the end of the horizon (t > T - W - 1) the whole remaining problem
is visible and the offline gains are used with the forecasts in place of the
unknown future disturbances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .config import DEFAULT
from .errors import BranchError, DimensionError, InstanceMismatchError, SolverError
from .offline import Trajectory, _stacked_dynamics, build_offline_policy, stage_costs
from .riccati import closed_loop, stability_constants

WINDOWED = "windowed"
EXACT_TAIL = "exact-tail"


@dataclass(frozen=True)
class MpcGains:
    """Gains used at stage t.

    ``Pbar[k]`` is Pbar_{t+k|t} (last entry is the terminal matrix: P_max for
    the windowed branch, Q_T for the exact tail); ``Kbar_local[k]`` is
    Kbar_{t+k|t}; ``Kbar_d[k]`` is Kbar_t^{d,t+k}.
    """

    t: int
    W: int
    branch: str
    Pbar: np.ndarray
    Kbar_local: np.ndarray
    Kbar_d: np.ndarray
    sys: object = field(repr=False)

    @property
    def Kbar(self):
        return self.Kbar_local[0]

    @property
    def last(self):
        """Last disturbance stage the action depends on."""
        return self.t + len(self.Kbar_d) - 1

    def Kd_at(self, i):
        if not (self.t <= i <= self.last):
            raise IndexError(f"Kbar_{self.t}^{{d,{i}}} undefined")
        return self.Kbar_d[i - self.t]

    def P_at(self, s):
        return self.Pbar[s - self.t]

    def Phibar(self, j, i):
        """Predicted transition (A - B_u Kbar_{j-1|t}) ... (A - B_u Kbar_{i|t}) for absolute stages i <= j."""
        if not (self.t <= i <= j <= self.t + len(self.Kbar_local)):
            raise IndexError(f"Phibar_{self.t}({j}, {i}) undefined")
        M = np.eye(self.sys.n)
        for s in range(i, j):
            M = closed_loop(self.sys, self.Kbar_local[s - self.t]) @ M
        return M


def _batched_solve(S, rhs, cond_limit, stages):
    """S_k^{-1} rhs_k for a stack of SPD matrices, with the singularity check of the offline pass."""
    w, V = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
    bad = (w[:, 0] <= 0) | (w[:, -1] > cond_limit * w[:, 0])
    if np.any(bad):
        k = int(np.argmax(bad))
        raise SolverError(f"R + B_u'PB_u is numerically singular (eigenvalues {w[k, 0]:.3e}..{w[k, -1]:.3e})",
                          int(stages[k]))
    return V @ ((np.swapaxes(V, -1, -2) @ rhs) / w[:, :, None])


def _local_passes(stages, sys, costs, W, P_max, tol):
    """Windowed gains for several stages at once.

    Each stage t runs its own backward pass over Q_t..Q_{t+W} from P_max; the
    passes are independent, so they are advanced together along the window.
    """
    ts = np.asarray(stages, dtype=int)
    m, n, n_u = len(ts), sys.n, sys.n_u
    A, B = sys.A, sys.B_u
    P = np.empty((W + 2, m, n, n))
    K = np.empty((W + 1, m, n_u, n))
    P[W + 1] = P_max
    for k in range(W, -1, -1):
        Pn = P[k + 1]
        PA = Pn @ A
        PB = Pn @ B
        S = costs.R[ts - 1 + k] + B.T @ PB
        K[k] = _batched_solve(S, np.swapaxes(PB, -1, -2) @ A, tol.singular_cond, ts + k)
        F = costs.Q[ts - 1 + k] + A.T @ PA - np.swapaxes(PA, -1, -2) @ B @ K[k]
        P[k] = 0.5 * (F + np.swapaxes(F, -1, -2))
    # Kbar_t^{d,t+k} = S_t^{-1} B' Phibar_t(t+k+1, t+1)' Pbar_{t+k+1|t}
    S0 = costs.R[ts - 1] + B.T @ P[1] @ B
    SinvB = _batched_solve(S0, np.broadcast_to(B.T, (m, n_u, n)), tol.singular_cond, ts)
    Kd = np.empty((W + 1, m, n_u, n))
    M = np.broadcast_to(np.eye(n), (m, n, n))
    for k in range(W + 1):
        Kd[k] = SinvB @ np.swapaxes(M, -1, -2) @ P[k + 1]
        if k < W:
            M = (A - B @ K[k + 1]) @ M
    out = []
    for j, t in enumerate(ts):
        Pt, Kt, Kdt = P[:, j].copy(), K[:, j].copy(), Kd[:, j].copy()
        for arr in (Pt, Kt, Kdt):
            arr.setflags(write=False)
        out.append(MpcGains(int(t), W, WINDOWED, Pt, Kt, Kdt, sys))
    return out


def mpc_gains_at(t, sys, costs, bounds, W, P_max=None, tol=DEFAULT):
    """Local pass over stages t..t+W with terminal P_max (windowed regime only)."""
    T = costs.T
    if not (1 <= t <= T - W - 1):
        raise BranchError(f"stage {t} is outside the windowed regime 1..{T - W - 1}; use the exact-tail gains")
    if P_max is None:
        P_max = stability_constants(sys, bounds, tol=tol).P_max
    return _local_passes([t], sys, costs, W, P_max, tol)[0]


def tail_gains_at(t, policy, W):
    """Offline gains used by the exact-tail branch at stage t."""
    T = policy.T
    if not (T - W - 1 < t <= T - 1):
        raise BranchError(f"stage {t} is not in the exact-tail regime (T={T}, W={W})")
    p = policy.pass_
    return MpcGains(t, W, EXACT_TAIL, p.P[t - 1 :], p.K[t - 1 :], policy.Kd[t - 1, t - 1 :], policy.sys)


def mpc_action(t, x, preds, gains):
    if gains.t != t:
        raise BranchError(f"gains were built for stage {gains.t}, not {t}")
    _, d = preds.window(t)
    m = len(gains.Kbar_d)
    if len(d) < m:
        raise BranchError(f"stage {t} needs {m} forecasts, the stream holds {len(d)}")
    w = d[:m] @ gains.sys.B_d.T
    return -gains.Kbar @ x - np.einsum("kun,kn->u", gains.Kbar_d, w)


@dataclass(frozen=True)
class MpcRollout:
    traj: Trajectory
    gains: list       # MpcGains per stage 1..T-1
    sys: object
    costs: object
    bounds: object
    trace: object
    preds: object
    W: int
    constants: object
    policy: object

    @property
    def T(self):
        return self.costs.T

    @property
    def branches(self):
        return [g.branch for g in self.gains]

    def gains_at(self, t):
        return self.gains[t - 1]

    def Kbar(self, t):
        return self.gains[t - 1].Kbar

    def phi_mpc(self, t, t0):
        """(A - B_u Kbar_{t-1}) ... (A - B_u Kbar_{t0}), identity when t == t0."""
        if not (1 <= t0 <= t <= self.T):
            raise IndexError(f"Phi_MPC({t}, {t0}) undefined for T={self.T}")
        M = np.eye(self.sys.n)
        for s in range(t0, t):
            M = closed_loop(self.sys, self.Kbar(s)) @ M
        return M

    def phi_mpc_table(self, t0):
        """Phi_MPC(t, t0) for t = t0..T stacked along the first axis."""
        out = [np.eye(self.sys.n)]
        for s in range(t0, self.T):
            out.append(closed_loop(self.sys, self.Kbar(s)) @ out[-1])
        return np.array(out)


def _same_trace(a, b):
    return a is b or (np.array_equal(a.d, b.d) and np.array_equal(a.x1, b.x1))


def mpc_gain_schedule(sys, costs, bounds, W, P_max, policy, tol=DEFAULT):
    """Gains of every stage 1..T-1; they do not depend on the forecasts."""
    T = costs.T
    if P_max is None:
        P_max = stability_constants(sys, bounds, tol=tol).P_max
    windowed = _local_passes(range(1, T - W), sys, costs, W, P_max, tol) if T - W - 1 >= 1 else []
    return windowed + [tail_gains_at(t, policy, W) for t in range(max(1, T - W), T)]


def mpc_rollout(sys, costs, bounds, trace, preds, W, constants=None, policy=None, tol=DEFAULT, gains=None):
    """Run the MPC controller over the whole horizon under the true disturbances.

    ``gains`` may carry a precomputed ``mpc_gain_schedule`` for the same instance.
    """
    T = costs.T
    if trace.T != T:
        raise DimensionError("d", f"trace covers T={trace.T}, costs cover T={costs.T}")
    if preds.W < W:
        raise DimensionError("preds", f"prediction window {preds.W} is shorter than W={W}")
    if not _same_trace(preds.trace, trace):
        raise InstanceMismatchError("prediction stream was built around a different trace")
    if constants is None:
        constants = stability_constants(sys, bounds, tol=tol)
    if policy is None:
        policy = build_offline_policy(sys, costs, tol)
    if gains is None:
        gains = mpc_gain_schedule(sys, costs, bounds, W, constants.P_max, policy, tol)
    elif len(gains) != T - 1 or any(g.W != W for g in gains):
        raise InstanceMismatchError(f"gain schedule does not match T={T}, W={W}")
    x = np.empty((T, sys.n))
    u = np.empty((T - 1, sys.n_u))
    x[0] = trace.x1
    for t in range(1, T):
        g = gains[t - 1]
        u[t - 1] = mpc_action(t, x[t - 1], preds, g)
        x[t] = sys.step(x[t - 1], u[t - 1], trace.d[t - 1])
    traj = Trajectory(x, u, stage_costs(costs, x, u))
    return MpcRollout(traj, gains, sys, costs, bounds, trace, preds, W, constants, policy)


def _condensed_solve(Qs, Rs, x, d, sys):
    """Eliminate the states and solve the normal equations in the inputs.

    The Hessian contains powers of A up to the window length, so for open-loop
    unstable A and long windows its condition number explodes.
    """
    m = len(Rs)
    Sx, Su, Sd = _stacked_dynamics(sys.A, sys.B_u, sys.B_d, m + 1)
    n, n_u = sys.n, sys.n_u
    free = Sx @ x + Sd @ d.ravel()
    H = np.zeros((m * n_u, m * n_u))
    g = np.zeros(m * n_u)
    for k, Qk in enumerate(Qs):
        rows = slice(k * n, (k + 1) * n)
        Sk = Su[rows]
        H += Sk.T @ Qk @ Sk
        g += Sk.T @ Qk @ free[rows]
    for k, Rk in enumerate(Rs):
        H[k * n_u : (k + 1) * n_u, k * n_u : (k + 1) * n_u] += Rk
    return np.linalg.solve(0.5 * (H + H.T), -g)[:n_u]


def _kkt_solve(Qs, Rs, x, d, sys):
    """Keep states as unknowns and solve the equality-constrained KKT system.

    Unknowns are z = (x_0..x_m, u_0..u_{m-1}); the dynamics enter as linear
    constraints, so no powers of A appear and the system stays well conditioned.
    """
    m = len(Rs)
    n, n_u = sys.n, sys.n_u
    nx, nz = (m + 1) * n, (m + 1) * n + m * n_u
    H = scipy.linalg.block_diag(*Qs, *Rs)
    E = np.zeros((nx, nz))
    b = np.zeros(nx)
    E[:n, :n] = np.eye(n)
    b[:n] = x
    for k in range(m):
        r = slice((k + 1) * n, (k + 2) * n)
        E[r, (k + 1) * n : (k + 2) * n] = np.eye(n)
        E[r, k * n : (k + 1) * n] = -sys.A
        E[r, nx + k * n_u : nx + (k + 1) * n_u] = -sys.B_u
        b[r] = sys.B_d @ d[k]
    kkt = np.block([[H, E.T], [E, np.zeros((nx, nx))]])
    sol = scipy.linalg.solve(kkt, np.concatenate([np.zeros(nz), b]), assume_a="sym")
    return sol[nx : nx + n_u]


def mpc_qp_crosscheck(t, x, preds, sys, costs, bounds, W, P_max=None, tol=DEFAULT, method="kkt"):
    """First input of the stage-t MPC problem solved as a plain quadratic program.

    Windowed stages minimise over u_t..u_{t+W} with terminal P_max; tail stages
    minimise over u_t..u_{T-1} with terminal Q_T. Forecasts d_{k|t} drive the
    model in both cases. ``method`` is "kkt" (states kept as unknowns) or
    "condensed" (states eliminated, normal equations in the inputs).
    """
    T = costs.T
    if t <= T - W - 1:
        m = W + 1
        if P_max is None:
            P_max = stability_constants(sys, bounds, tol=tol).P_max
        terminal = P_max
    else:
        m = T - t
        terminal = costs.Q[-1]
    Qs = list(costs.Q[t - 1 : t - 1 + m]) + [terminal]
    Rs = list(costs.R[t - 1 : t - 1 + m])
    d = np.array([preds.pred(t, k) for k in range(t, t + m)])
    x = np.asarray(x, dtype=float)
    if method == "kkt":
        return _kkt_solve(Qs, Rs, x, d, sys)
    if method == "condensed":
        return _condensed_solve(Qs, Rs, x, d, sys)
    raise ValueError(f"unknown method {method!r}")


def write_rollout_csv(path, rollout):
    traj = rollout.traj
    n, n_u = traj.x.shape[1], traj.u.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "branch"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(n_u)] + ["stage_cost"])
        for t in range(1, traj.T + 1):
            branch = rollout.gains[t - 1].branch if t < traj.T else "terminal"
            u = [format(v, ".17g") for v in traj.u[t - 1]] if t < traj.T else [""] * n_u
            w.writerow([t, branch] + [format(v, ".17g") for v in traj.x[t - 1]] + u
                       + [format(traj.stage_costs[t - 1], ".17g")])


def write_gains_dump(path, rollout):
    """Plain-text dump: one block per stage, matrices row-major, 17 significant digits."""
    def fmt(M):
        return " ".join(format(v, ".17g") for v in np.ravel(M))

    with open(path, "w", encoding="utf-8") as fh:
        for g in rollout.gains:
            fh.write(f"stage {g.t} branch {g.branch}\n")
            fh.write(f"  Kbar {fmt(g.Kbar)}\n")
            for i in range(g.t, g.last + 1):
                fh.write(f"  Kbar_d {i} {fmt(g.Kd_at(i))}\n")
