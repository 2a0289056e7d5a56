"""Dynamic regret of online policies against the hindsight-optimal controller.

For any policy whose action depends only on the current state and the online
information, the regret equals

    sum_t (u_t - u_t^*)' (R_t + B_u'P_{t+1}B_u) (u_t - u_t^*)

where u_t^* is the optimal policy evaluated at the *policy's own* state x_t
with the true future disturbances. Note this is not the action of the optimal
trajectory; ``optimal_actions_along`` computes exactly this counterfactual.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT
from .errors import DomainError, InstanceMismatchError
from .offline import optimal_rollout
from .riccati import explicit_constants


def optimal_actions_along(policy, trace, x):
    """u_t^* = pi_t^*(x_t, d_t, ..., d_{T-1}) for each state x_t of a trajectory."""
    ff = policy.feedforward(trace)
    return np.array([-policy.K(t) @ x[t - 1] - ff[t - 1] for t in range(1, policy.T)])


def _traj(obj):
    return getattr(obj, "traj", obj)


def regret_formula(traj, policy, trace):
    """Quadratic action-gap form of the regret for an arbitrary trajectory."""
    traj = _traj(traj)
    B = policy.sys.B_u
    du = traj.u - optimal_actions_along(policy, trace, traj.x)
    total = 0.0
    for t in range(1, policy.T):
        H = policy.costs.R[t - 1] + B.T @ policy.P(t + 1) @ B
        total += float(du[t - 1] @ H @ du[t - 1])
    return total


def regret_formula_op(rollout, policy, trace):
    return regret_formula(rollout.traj, policy, trace)


# -- bound factors ------------------------------------------------------------

def part1_coefficient(rho, gamma, W):
    """[(gamma^W + rho^W)/(1 - rho) + gamma (rho^W - gamma^W)/(rho - gamma)]^2."""
    if rho == gamma:
        mixed = W * gamma**W
    elif abs(rho - gamma) < 1e-6 * max(rho, gamma):
        mixed = sum(rho**k * gamma ** (W - k) for k in range(W))
    else:
        mixed = gamma * (rho**W - gamma**W) / (rho - gamma)
    return ((gamma**W + rho**W) / (1 - rho) + mixed) ** 2


def part2_coefficient(rho, gamma, W):
    """(1/(1 - rho) + gamma^W/(1 - rho^2)) (1 + gamma^W/(1 - rho))."""
    gW = gamma**W
    return (1 / (1 - rho) + gW / (1 - rho**2)) * (1 + gW / (1 - rho))


def disturbance_energy(sys, trace):
    Bd = trace.d @ sys.B_d.T
    return float(trace.x1 @ trace.x1 + np.sum(Bd * Bd))


def prediction_error_energy(sys, preds, rho):
    """sum_j sum_{i=j}^{j+W} rho^{i-j} ||B_d e_{i|j}||^2."""
    d = preds.trace.d
    T1 = d.shape[0]
    total = 0.0
    for k in range(min(preds.W, T1 - 1) + 1):
        e = (preds.values[: T1 - k, k] - d[k:]) @ sys.B_d.T  # e_{j+k|j} for every j
        total += rho**k * float(np.sum(e * e))
    return total


@dataclass(frozen=True)
class Theorem1Factors:
    """W-dependent coefficients and energies of the regret bound.

    The absolute prefactors of the two parts are not available in closed form,
    so ``part_I``/``part_II`` are the structural products only.
    """

    rho: float
    gamma: float
    tau: float
    W: int
    partI_coeff: float
    energy_d: float
    partII_coeff: float
    energy_e: float
    constants: dict = field(default_factory=dict)

    @property
    def part_I(self):
        return self.partI_coeff * self.energy_d

    @property
    def part_II(self):
        return self.partII_coeff * self.energy_e


def theorem1_factors(constants, W, trace, preds, sys, bounds=None):
    rho, gamma = constants.rho, constants.gamma
    if not (0 <= rho < 1 and 0 <= gamma < 1):
        raise DomainError(f"degenerate constants rho={rho}, gamma={gamma}; the bound needs both below 1")
    consts = explicit_constants(sys, bounds, constants) if bounds is not None else {}
    return Theorem1Factors(
        rho, gamma, constants.tau, W,
        part1_coefficient(rho, gamma, W), disturbance_energy(sys, trace),
        part2_coefficient(rho, gamma, W), prediction_error_energy(sys, preds, rho) if preds is not None else 0.0,
        consts,
    )


def proof_constant(sys, bounds, constants):
    """A concrete value for the constant c of the N/L decay bounds, from c1..c5."""
    k = explicit_constants(sys, bounds, constants)
    tau, rho = constants.tau, constants.rho
    nB = float(np.linalg.norm(sys.B_u, 2))
    return max(
        k["c2"] * tau,
        k["c2"] * k["c4"],
        rho * k["c2"] * k["c5"] + k["c3"],
        rho * k["c2"] * k["c5"] + 2 * k["c1"],
        k["c2"] * tau * nB * k["c1"],
        k["c1"],
    )


def n_profile(i, t, W, rho, gamma):
    """Decay profile claimed for ||N_{i|t}|| (i = 0 is the x_1 coefficient)."""
    if i == 0:
        return gamma**W * rho ** (t - 1)
    if i <= t - 1:
        return gamma**W * rho ** (t - i - 1)
    if i <= t + W:
        return gamma ** (W - i + t) * rho ** (i - t)
    return rho ** (i - t)


def l_profile(i, j, t, W, rho, gamma):
    """Decay profile claimed for ||L_{(i,j)|t}||."""
    if j <= t - 1:
        return gamma**W * rho ** (t - 2 * j + i - 1)
    return rho ** (i - t)


# -- decomposition --------------------------------------------------------------

class Decomposition:
    """Action-error decomposition of an MPC rollout.

    Per stage t: ``truncation[t-1]`` (forecast horizon too short),
    ``prediction[t-1]`` (forecast errors) and ``approximation[t-1]`` (local
    gains differ from offline gains); they sum to u_t^MPC - u_t^*. The
    matrices M, N and L rewrite states and action errors in terms of x_1, the
    disturbances and the forecast errors.
    """

    def __init__(self, rollout, policy, trace, preds):
        self.rollout = rollout
        self.policy = policy
        self.trace = trace
        self.preds = preds
        self.sys = policy.sys
        self.T = policy.T
        self.W = rollout.W
        self._phi = {}
        Bd = self.sys.B_d
        T, n_u = self.T, self.sys.n_u
        self.truncation = np.zeros((T - 1, n_u))
        self.prediction = np.zeros((T - 1, n_u))
        self.approximation = np.zeros((T - 1, n_u))
        for t in range(1, T):
            g = rollout.gains_at(t)
            x = rollout.traj.x[t - 1]
            approx = (policy.K(t) - g.Kbar) @ x
            pred = np.zeros(n_u)
            for i in range(t, g.last + 1):
                approx += (policy.Kd_at(t, i) - g.Kd_at(i)) @ (Bd @ trace.d[i - 1])
                pred -= g.Kd_at(i) @ (Bd @ preds.error(i, t))
            trunc = np.zeros(n_u)
            for i in range(g.last + 1, T):
                trunc += policy.Kd_at(t, i) @ (Bd @ trace.d[i - 1])
            self.truncation[t - 1] = trunc
            self.prediction[t - 1] = pred
            self.approximation[t - 1] = approx

    @property
    def total(self):
        return self.truncation + self.prediction + self.approximation

    def phi_mpc(self, t, t0):
        table = self._phi.get(t0)
        if table is None:
            table = self._phi[t0] = self.rollout.phi_mpc_table(t0)
        return table[t - t0]

    def _dK(self, t):
        return self.policy.K(t) - self.rollout.Kbar(t)

    def M(self, i, t):
        n = self.sys.n
        Bu = self.sys.B_u
        out = np.zeros((n, n))
        for j in range(max(1, i - self.W), min(t - 1, i) + 1):
            g = self.rollout.gains_at(j)
            if i > g.last:
                continue
            term = -Bu @ g.Kd_at(i)
            if i == j:
                term = term + np.eye(n)
            out += self.phi_mpc(t, j + 1) @ term
        return out

    def state_expansion(self, t):
        """x_t^MPC rebuilt from x_1, the disturbances and the forecast errors."""
        Bu, Bd = self.sys.B_u, self.sys.B_d
        x = self.phi_mpc(t, 1) @ self.trace.x1
        for i in range(1, min(t + self.W, self.T - 1) + 1):
            x = x + self.M(i, t) @ (Bd @ self.trace.d[i - 1])
        for j in range(1, t):
            g = self.rollout.gains_at(j)
            P = self.phi_mpc(t, j + 1) @ Bu
            for i in range(j, g.last + 1):
                x = x - P @ g.Kd_at(i) @ (Bd @ self.preds.error(i, j))
        return x

    def N(self, i, t):
        dK = self._dK(t)
        if i == 0:
            return dK @ self.phi_mpc(t, 1)
        out = dK @ self.M(i, t)
        if i >= t:
            g = self.rollout.gains_at(t)
            if i <= g.last:
                out = out + self.policy.Kd_at(t, i) - g.Kd_at(i)
            else:
                out = out + self.policy.Kd_at(t, i)
        return out

    def L(self, i, j, t):
        n_u, n = self.sys.n_u, self.sys.n
        if j > t:
            return np.zeros((n_u, n))
        g = self.rollout.gains_at(j)
        if not (j <= i <= g.last):
            return np.zeros((n_u, n))
        if j == t:
            return -g.Kd_at(i)
        return -self._dK(t) @ self.phi_mpc(t, j + 1) @ self.sys.B_u @ g.Kd_at(i)

    def action_error_expansion(self, t):
        """u_t^MPC - u_t^* rebuilt from the N and L matrices."""
        Bd = self.sys.B_d
        out = self.N(0, t) @ self.trace.x1
        for i in range(1, self.T):
            out = out + self.N(i, t) @ (Bd @ self.trace.d[i - 1])
        for j in range(1, t + 1):
            g = self.rollout.gains_at(j)
            for i in range(j, g.last + 1):
                out = out + self.L(i, j, t) @ (Bd @ self.preds.error(i, j))
        return out


def decompose_action_errors(rollout, policy, gains_per_step=None, trace=None, preds=None):
    if gains_per_step is not None and gains_per_step is not rollout.gains:
        raise InstanceMismatchError("gains_per_step must be the gains retained by the rollout")
    if not rollout.gains:
        raise InstanceMismatchError("rollout retained no gains")
    return Decomposition(rollout, policy, trace or rollout.trace, preds or rollout.preds)


# -- report -----------------------------------------------------------------------

@dataclass
class RegretReport:
    J_pi: float
    J_star: float
    regret: float
    regret_formula: float
    action_errors: np.ndarray
    decomposition: Decomposition = None
    bound: Theorem1Factors = None

    def consistent(self, tol=DEFAULT):
        scale = 1 + abs(self.J_star)
        return (self.regret >= -tol.rtol * scale
                and abs(self.regret - self.regret_formula) <= tol.rtol * scale)

    def as_record(self):
        rec = {
            "J_pi": self.J_pi,
            "J_star": self.J_star,
            "regret": self.regret,
            "regret_formula": self.regret_formula,
        }
        if self.bound is not None:
            b = self.bound
            rec.update(rho=b.rho, gamma=b.gamma, tau=b.tau, W=b.W, partI_coeff=b.partI_coeff,
                       energy_d=b.energy_d, partII_coeff=b.partII_coeff, energy_e=b.energy_e)
            rec.update(b.constants)
        return rec


def _check_same_instance(rollout, policy, trace):
    if rollout.T != policy.T:
        raise InstanceMismatchError(f"rollout horizon {rollout.T} differs from policy horizon {policy.T}")
    if not (rollout.costs is policy.costs or (np.array_equal(rollout.costs.Q, policy.costs.Q)
                                              and np.array_equal(rollout.costs.R, policy.costs.R))):
        raise InstanceMismatchError("rollout and policy were built from different cost schedules")
    if not (np.array_equal(rollout.trace.d, trace.d) and np.array_equal(rollout.trace.x1, trace.x1)):
        raise InstanceMismatchError("rollout was run on a different disturbance trace")


def dynamic_regret(rollout, policy, trace, decompose=True):
    _check_same_instance(rollout, policy, trace)
    J_star = optimal_rollout(policy, trace).J
    J_pi = rollout.traj.J
    x = rollout.traj.x
    du = rollout.traj.u - optimal_actions_along(policy, trace, x)
    bound = theorem1_factors(rollout.constants, rollout.W, trace, rollout.preds, rollout.sys, rollout.bounds)
    return RegretReport(
        J_pi, J_star, J_pi - J_star, regret_formula(rollout.traj, policy, trace), du,
        Decomposition(rollout, policy, trace, rollout.preds) if decompose else None,
        bound,
    )


def quadratic_sum_inequality_check(a, y):
    """sum_t (sum_i a[t, i] y_i)^2 <= max_i sum_t a[t, i] (sum_j a[t, j]) * sum_i y_i^2."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    y = np.ravel(np.asarray(y, dtype=float))
    if np.any(a < 0):
        raise DomainError("coefficients must be non-negative")
    lhs = float(np.sum((a @ y) ** 2))
    weights = (a * a.sum(axis=1, keepdims=True)).sum(axis=0)
    rhs = float(weights.max(initial=0.0) * (y @ y))
    return lhs <= rhs * (1 + 1e-12) + 1e-300


def write_report(path, report):
    """Flat ``key = value`` record of the scalar fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in report.as_record().items():
            fh.write(f"{k} = {format(v, '.17g') if isinstance(v, float) else v}\n")


def write_decomposition_csv(path, report):
    dec = report.decomposition
    n_u = dec.truncation.shape[1]
    cols = ["t"]
    for name in ("action_error", "truncation", "prediction", "approximation"):
        cols += [f"{name}{k + 1}" for k in range(n_u)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in range(1, dec.T):
            row = [t]
            for arr in (report.action_errors, dec.truncation, dec.prediction, dec.approximation):
                row += [format(v, ".17g") for v in arr[t - 1]]
            w.writerow(row)


def is_finite(x):
    return math.isfinite(x)
