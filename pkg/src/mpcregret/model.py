"""Problem data: dynamics, cost schedules, disturbances, predictions.

Stage indices follow the control convention used throughout the package:
stages are numbered ``t = 1, ..., T``. Arrays are stored 0-based, so
``costs.Q[t - 1]`` is the stage-``t`` state weight and ``trace.d[t - 1]`` is
the disturbance acting between stages ``t`` and ``t + 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DEFAULT, Tolerances
from .errors import DimensionError, DivergenceError, HorizonError, PredictionWindowError, SolverError
from .linalg import asymmetry, lam_min
from .rng import Stream


def _frozen(x, ndim, name):
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(name, f"expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(name, "contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _as_matrix(x, name):
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return _frozen(arr, 2, name)


@dataclass(frozen=True)
class LinearSystem:
    """x_{t+1} = A x_t + B_u u_t + B_d d_t."""

    A: np.ndarray
    B_u: np.ndarray
    B_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B_u", _as_matrix(self.B_u, "B_u"))
        object.__setattr__(self, "B_d", _as_matrix(self.B_d, "B_d"))
        n = self.A.shape[0]
        if n < 1 or self.A.shape != (n, n):
            raise DimensionError("A", f"must be square with n >= 1, got {self.A.shape}")
        if self.B_u.shape[0] != n or self.B_u.shape[1] < 1:
            raise DimensionError("B_u", f"expected shape ({n}, n_u >= 1), got {self.B_u.shape}")
        if self.B_d.shape[0] != n or self.B_d.shape[1] < 1:
            raise DimensionError("B_d", f"expected shape ({n}, n_d >= 1), got {self.B_d.shape}")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B_u.shape[1]

    @property
    def n_d(self):
        return self.B_d.shape[1]

    def step(self, x, u, d):
        return self.A @ x + self.B_u @ u + self.B_d @ d


@dataclass(frozen=True)
class CostSchedule:
    """Stage weights Q_1..Q_T (Q_T is terminal) and R_1..R_{T-1}."""

    Q: np.ndarray
    R: np.ndarray
    tol: Tolerances = field(default=DEFAULT, repr=False, compare=False)

    def __post_init__(self):
        Q = _frozen(self.Q, 3, "Q")
        R = _frozen(self.R, 3, "R")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        T = Q.shape[0]
        if T < 2:
            raise HorizonError(f"horizon T must be >= 2, got {T}")
        if Q.shape[1] != Q.shape[2]:
            raise DimensionError("Q", f"stage matrices must be square, got {Q.shape[1:]}")
        if R.shape[0] != T - 1 or R.shape[1] != R.shape[2]:
            raise DimensionError("R", f"expected shape ({T - 1}, n_u, n_u), got {R.shape}")
        for name, mats in (("Q", Q), ("R", R)):
            for k, M in enumerate(mats):
                if asymmetry(M) > self.tol.symmetry:
                    raise DimensionError(f"{name}[{k + 1}]", "not symmetric")
                if lam_min(M) <= 0:
                    raise DimensionError(f"{name}[{k + 1}]", "not positive definite")

    @property
    def T(self):
        return self.Q.shape[0]

    @property
    def n(self):
        return self.Q.shape[1]

    @property
    def n_u(self):
        return self.R.shape[1]

    @classmethod
    def constant(cls, Q, R, T, Q_T=None):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        Qs = np.repeat(Q[None], T, axis=0)
        if Q_T is not None:
            Qs[-1] = Q_T
        return cls(Qs, np.repeat(R[None], T - 1, axis=0))


@dataclass(frozen=True)
class CostBounds:
    """Loewner bounds Q_min <= Q_t <= Q_max and R_min <= R_t <= R_max."""

    Q_min: np.ndarray
    Q_max: np.ndarray
    R_min: np.ndarray
    R_max: np.ndarray

    def __post_init__(self):
        for name in ("Q_min", "Q_max", "R_min", "R_max"):
            M = _as_matrix(getattr(self, name), name)
            if M.shape[0] != M.shape[1]:
                raise DimensionError(name, "must be square")
            if lam_min(M) <= 0:
                raise DimensionError(name, "must be positive definite")
            object.__setattr__(self, name, M)
        if self.Q_min.shape != self.Q_max.shape:
            raise DimensionError("Q_max", "shape differs from Q_min")
        if self.R_min.shape != self.R_max.shape:
            raise DimensionError("R_max", "shape differs from R_min")

    def violations(self, costs, tol=DEFAULT.bounds_eig):
        """List of (field, stage) pairs where the schedule leaves the bounds."""
        bad = []
        for t, Q in enumerate(costs.Q, start=1):
            if lam_min(Q - self.Q_min) < -tol:
                bad.append(("Q_min", t))
            if lam_min(self.Q_max - Q) < -tol:
                bad.append(("Q_max", t))
        for t, R in enumerate(costs.R, start=1):
            if lam_min(R - self.R_min) < -tol:
                bad.append(("R_min", t))
            if lam_min(self.R_max - R) < -tol:
                bad.append(("R_max", t))
        return bad


@dataclass(frozen=True)
class DisturbanceTrace:
    """True disturbances d_1..d_{T-1} and the initial state x_1."""

    d: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim == 1:
            d = d.reshape(-1, 1)
        object.__setattr__(self, "d", _frozen(d, 2, "d"))
        object.__setattr__(self, "x1", _frozen(np.ravel(self.x1), 1, "x1"))
        if self.d.shape[0] < 1:
            raise HorizonError("trace must hold at least one disturbance (T >= 2)")

    @property
    def T(self):
        return self.d.shape[0] + 1

    def at(self, t):
        return self.d[t - 1]


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian prediction noise.

    ``snr`` is the noise amplitude (larger means worse forecasts). With
    ``growth > 0`` the standard deviation at lookahead depth k = i - t becomes
    ``snr * (1 + growth * k)``.
    """

    snr: float = 0.0
    growth: float = 0.0

    def __post_init__(self):
        if self.snr < 0 or self.growth < 0:
            raise ValueError("snr and growth must be non-negative")

    @property
    def accurate(self):
        return self.snr == 0.0

    def scale(self, depth):
        return self.snr * (1.0 + self.growth * np.asarray(depth, dtype=float))


@dataclass(frozen=True)
class PredictionStream:
    """Forecasts d_{i|t} for t <= i <= min(t + W, T - 1).

    ``values[t - 1, k]`` holds d_{t+k|t}; slots past stage T - 1 are NaN and
    are never served.
    """

    trace: DisturbanceTrace
    W: int
    values: np.ndarray

    def __post_init__(self):
        if self.W < 0:
            raise ValueError("W must be >= 0")
        v = np.array(self.values, dtype=float)
        T1 = self.trace.T - 1
        expect = (T1, self.W + 1, self.trace.d.shape[1])
        if v.shape != expect:
            raise DimensionError("values", f"expected shape {expect}, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def T(self):
        return self.trace.T

    def _check(self, t, i):
        T = self.T
        if not (1 <= t <= T - 1 and t <= i <= min(t + self.W, T - 1)):
            raise PredictionWindowError(f"no prediction d_{{{i}|{t}}} (W={self.W}, T={T})")

    def pred(self, t, i):
        self._check(t, i)
        return self.values[t - 1, i - t]

    def error(self, i, t):
        """e_{i|t} = d_{i|t} - d_i."""
        self._check(t, i)
        return self.values[t - 1, i - t] - self.trace.d[i - 1]

    def window(self, t):
        """Stages and forecasts available at stage t."""
        last = min(t + self.W, self.T - 1)
        self._check(t, t)
        return np.arange(t, last + 1), self.values[t - 1, : last - t + 1]

    def max_abs_error(self):
        worst = 0.0
        for t in range(1, self.T):
            idx, vals = self.window(t)
            worst = max(worst, float(np.max(np.abs(vals - self.trace.d[idx - 1]))))
        return worst


def make_predictions(trace, W, noise=None, seed=0):
    """Build a W-step forecast stream around ``trace``.

    The unit-variance draws for stage t come from the stream
    ``(seed, "predictions", t)`` in depth order, so the same seed yields the
    same draws for every W and every snr (common random numbers).
    """
    if W < 0:
        raise ValueError("W must be >= 0")
    noise = noise or NoiseSpec()
    T1 = trace.T - 1
    n_d = trace.d.shape[1]
    vals = np.full((T1, W + 1, n_d), np.nan)
    for t in range(1, T1 + 1):
        k = min(W, T1 - t) + 1
        block = trace.d[t - 1 : t - 1 + k].copy()
        if not noise.accurate:
            z = Stream(seed, "predictions", t).normal((k, n_d))
            block = block + noise.scale(np.arange(k))[:, None] * z
        vals[t - 1, :k] = block
    return PredictionStream(trace, W, vals)


def accurate_predictions(trace, W):
    return make_predictions(trace, W, NoiseSpec(), 0)


@dataclass(frozen=True)
class GeneratorProfile:
    """Random instance recipe: Q_t = q_t I, R_t = r_t I, d_t ~ d_std N(0, I)."""

    A: np.ndarray
    B_u: np.ndarray
    B_d: np.ndarray
    q_range: tuple = (2.0, 3.0)
    r_range: tuple = (5.0, 6.0)
    d_std: float = 1.0
    x1_std: float = 1.0

    @property
    def system(self):
        return LinearSystem(self.A, self.B_u, self.B_d)


def paper_profile(**overrides):
    """A = [[0, 1], [1, 0]], B_u = B_d = [0; 1], q_t ~ U[2, 3], r_t ~ U[5, 6], d_t ~ N(0, 1)."""
    base = dict(
        A=np.array([[0.0, 1.0], [1.0, 0.0]]),
        B_u=np.array([[0.0], [1.0]]),
        B_d=np.array([[0.0], [1.0]]),
    )
    base.update(overrides)
    return GeneratorProfile(**base)


def generate_instance(seed, T, profile=None):
    """Draw (system, costs, bounds, trace) for ``seed``; bit-identical per seed."""
    if T < 2:
        raise HorizonError(f"horizon T must be >= 2, got {T}")
    profile = profile or paper_profile()
    sys = profile.system
    n, n_u, n_d = sys.n, sys.n_u, sys.n_d
    q_lo, q_hi = profile.q_range
    r_lo, r_hi = profile.r_range
    q = q_lo + (q_hi - q_lo) * Stream(seed, "instance", "q").uniform(T)
    r = r_lo + (r_hi - r_lo) * Stream(seed, "instance", "r").uniform(T - 1)
    d = profile.d_std * Stream(seed, "instance", "d").normal((T - 1, n_d))
    x1 = profile.x1_std * Stream(seed, "instance", "x1").normal(n)
    costs = CostSchedule(q[:, None, None] * np.eye(n), r[:, None, None] * np.eye(n_u))
    bounds = CostBounds(q_lo * np.eye(n), q_hi * np.eye(n), r_lo * np.eye(n_u), r_hi * np.eye(n_u))
    return sys, costs, bounds, DisturbanceTrace(d, x1)


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)  # (name, passed, detail)

    def add(self, name, passed, detail=""):
        self.checks.append((name, bool(passed), detail))

    @property
    def ok(self):
        return all(p for _, p, _ in self.checks)

    def failed(self):
        return [c for c in self.checks if not c[1]]

    def __str__(self):
        lines = [f"{'PASS' if p else 'FAIL'}  {name}  {detail}".rstrip() for name, p, detail in self.checks]
        return "\n".join(lines)


def _observability_rank(A, Q, rel):
    n = A.shape[0]
    w, V = np.linalg.eigh(Q)
    root = (V * np.sqrt(np.maximum(w, 0.0))) @ V.T
    blocks, M = [], np.eye(n)
    for _ in range(n):
        blocks.append(root @ M)
        M = M @ A
    s = np.linalg.svd(np.vstack(blocks), compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rel * s[0]))


def validate_instance(sys, costs, bounds, tol=DEFAULT):
    """Check dimensions, cost invariants, bounds, stabilizability and detectability."""
    from .riccati import solve_dare

    n, n_u = sys.n, sys.n_u
    if costs.n != n:
        raise DimensionError("Q", f"stage matrices are {costs.n}x{costs.n}, system has n={n}")
    if costs.n_u != n_u:
        raise DimensionError("R", f"stage matrices are {costs.n_u}x{costs.n_u}, system has n_u={n_u}")
    if bounds.Q_min.shape != (n, n):
        raise DimensionError("Q_min", f"expected ({n}, {n}), got {bounds.Q_min.shape}")
    if bounds.R_min.shape != (n_u, n_u):
        raise DimensionError("R_min", f"expected ({n_u}, {n_u}), got {bounds.R_min.shape}")

    report = ValidationReport()
    report.add("dimensions", True, f"n={n} n_u={n_u} n_d={sys.n_d} T={costs.T}")
    sym_q = max(asymmetry(Q) for Q in costs.Q)
    sym_r = max(asymmetry(R) for R in costs.R)
    report.add("symmetry", max(sym_q, sym_r) <= tol.symmetry, f"max asymmetry {max(sym_q, sym_r):.2e}")
    pd = min(min(lam_min(Q) for Q in costs.Q), min(lam_min(R) for R in costs.R))
    report.add("positive definite", pd > 0, f"min eigenvalue {pd:.4g}")
    bad = bounds.violations(costs, tol.bounds_eig)
    report.add("cost bounds", not bad, "" if not bad else f"violations at {bad[:5]}")
    try:
        solve_dare(np.eye(n), np.eye(n_u), sys, tol=tol.dare_tol, max_iter=tol.dare_max_iter)
        report.add("stabilizable", True, "DARE(I, I) converged")
    except (DivergenceError, SolverError) as exc:
        report.add("stabilizable", False, str(exc))
    ranks = [_observability_rank(sys.A, Q, tol.detectability_rel) for Q in costs.Q]
    report.add("detectable", min(ranks) == n, f"min observability rank {min(ranks)} of {n}")
    return report


# -- instance files ---------------------------------------------------------

FORMAT = "mpcregret-instance/1"


def _encode(arr):
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": " ".join(format(v, ".17g") for v in arr.ravel())}


def _decode(obj):
    vals = [float(v) for v in obj["data"].split()] if obj["data"] else []
    return np.array(vals, dtype=float).reshape(obj["shape"])


def dump_instance(sys, costs, bounds, trace, seed=None):
    """Instance as a JSON document; matrices are row-major 17-digit decimal strings."""
    doc = {
        "format": FORMAT,
        "n": sys.n,
        "n_u": sys.n_u,
        "n_d": sys.n_d,
        "T": costs.T,
        "seed": seed,
        "A": _encode(sys.A),
        "B_u": _encode(sys.B_u),
        "B_d": _encode(sys.B_d),
        "Q": _encode(costs.Q),
        "R": _encode(costs.R),
        "Q_min": _encode(bounds.Q_min),
        "Q_max": _encode(bounds.Q_max),
        "R_min": _encode(bounds.R_min),
        "R_max": _encode(bounds.R_max),
        "x1": _encode(trace.x1),
        "d": _encode(trace.d),
    }
    return json.dumps(doc, indent=1)


def load_instance(text):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise DimensionError("format", f"unsupported instance format {doc.get('format')!r}")
    sys = LinearSystem(_decode(doc["A"]), _decode(doc["B_u"]), _decode(doc["B_d"]))
    costs = CostSchedule(_decode(doc["Q"]), _decode(doc["R"]))
    bounds = CostBounds(_decode(doc["Q_min"]), _decode(doc["Q_max"]), _decode(doc["R_min"]), _decode(doc["R_max"]))
    trace = DisturbanceTrace(_decode(doc["d"]), _decode(doc["x1"]))
    if costs.T != doc["T"] or trace.T != doc["T"]:
        raise DimensionError("T", "horizon does not match the stored matrices")
    return sys, costs, bounds, trace


def save_instance(path, sys, costs, bounds, trace, seed=None):
    Path(path).write_text(dump_instance(sys, costs, bounds, trace, seed), encoding="utf-8")


def read_instance(path):
    return load_instance(Path(path).read_text(encoding="utf-8"))
