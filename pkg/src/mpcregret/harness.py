"""Regret sweeps over (seed, W, snr) cells and their CSV output.

A sweep is fully determined by its config: instances and forecast noise come
from counter-based streams keyed on the seed, cells are grouped into one job
per seed, and rows are sorted before writing. The CSV is therefore
byte-identical across reruns and across ``jobs`` settings (``wall_ms`` stays
blank unless timing is switched on, since timings never repeat).
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import DEFAULT, Tolerances, with_overrides
from .errors import ConfigError, LQRError
from .model import GeneratorProfile, NoiseSpec, generate_instance, make_predictions, paper_profile
from .mpc import mpc_gain_schedule, mpc_rollout
from .offline import build_offline_policy, optimal_rollout
from .regret import regret_formula, theorem1_factors
from .riccati import stability_constants

log = logging.getLogger(__name__)

HEADER = "seed,W,snr,J_pi,J_star,regret,partI_coeff,energy_d,partII_coeff,energy_e,wall_ms"
COLUMNS = HEADER.split(",")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = tuple(range(20))
    T: int = 200
    W: tuple = tuple(range(1, 16))
    snr: tuple = (0.0,)
    noise_growth: float = 0.0
    profile: GeneratorProfile = field(default_factory=paper_profile)
    out: str = "sweep.csv"
    jobs: int = 1
    seed_offset: int = 0
    tolerances: Tolerances = DEFAULT
    timing: bool = False

    def __post_init__(self):
        if len(self.seeds) == 0:
            raise ConfigError("seed list is empty")
        if len(self.W) == 0:
            raise ConfigError("W list is empty")
        if len(self.snr) == 0:
            raise ConfigError("snr list is empty")
        if any(int(w) != w or w < 0 for w in self.W):
            raise ConfigError(f"W values must be non-negative integers, got {list(self.W)}")
        if any(not (s >= 0) or not math.isfinite(s) for s in self.snr):
            raise ConfigError(f"snr values must be finite and >= 0, got {list(self.snr)}")
        if not (self.noise_growth >= 0):
            raise ConfigError("noise_growth must be >= 0")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    @property
    def effective_seeds(self):
        return tuple(int(s) + self.seed_offset for s in self.seeds)

    def cells(self):
        return [(s, w, r) for s in self.effective_seeds for w in sorted(self.W) for r in sorted(self.snr)]


_PROFILE_KEYS = {"A", "B_u", "B_d", "q_range", "r_range", "d_std", "x1_std"}
_CONFIG_KEYS = {"seeds", "T", "W", "snr", "noise_growth", "profile", "out", "jobs", "seed_offset",
                "tolerances", "timing"}


def _profile_from(obj):
    if obj is None or obj == "paper":
        return paper_profile()
    if not isinstance(obj, dict):
        raise ConfigError("profile must be \"paper\" or an object")
    unknown = set(obj) - _PROFILE_KEYS
    if unknown:
        raise ConfigError(f"unknown profile keys: {sorted(unknown)}")
    kw = {}
    for k, v in obj.items():
        if k in ("A", "B_u", "B_d"):
            kw[k] = np.atleast_2d(np.asarray(v, dtype=float))
        elif k in ("q_range", "r_range"):
            if len(v) != 2 or not (0 < v[0] <= v[1]):
                raise ConfigError(f"{k} must be [lo, hi] with 0 < lo <= hi")
            kw[k] = (float(v[0]), float(v[1]))
        else:
            kw[k] = float(v)
    try:
        prof = paper_profile(**kw)
        prof.system  # dimension checks
    except (LQRError, ValueError) as exc:
        raise ConfigError(f"bad profile: {exc}") from exc
    return prof


def config_from_dict(obj, **overrides):
    """Build a config from parsed JSON; ``overrides`` win over file values (None is ignored)."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    obj = dict(obj)
    obj.update({k: v for k, v in overrides.items() if v is not None})
    kw = {}
    try:
        if "seeds" in obj:
            s = obj["seeds"]
            kw["seeds"] = tuple(range(s)) if isinstance(s, int) else tuple(int(x) for x in s)
        if "W" in obj:
            kw["W"] = tuple(obj["W"])
        if "snr" in obj:
            kw["snr"] = tuple(float(x) for x in obj["snr"])
        for k in ("T", "jobs", "seed_offset"):
            if k in obj:
                kw[k] = int(obj[k])
        if "noise_growth" in obj:
            kw["noise_growth"] = float(obj["noise_growth"])
        if "out" in obj:
            kw["out"] = str(obj["out"])
        if "timing" in obj:
            kw["timing"] = bool(obj["timing"])
        if "tolerances" in obj:
            kw["tolerances"] = with_overrides(obj["tolerances"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    kw["profile"] = _profile_from(obj.get("profile"))
    return ExperimentConfig(**kw)


def load_config(path, **overrides):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj, **overrides)


@dataclass(frozen=True)
class Row:
    seed: int
    W: int
    snr: float
    J_pi: float = math.nan
    J_star: float = math.nan
    regret: float = math.nan
    partI_coeff: float = math.nan
    energy_d: float = math.nan
    partII_coeff: float = math.nan
    energy_e: float = math.nan
    wall_ms: float = None
    error: str = None

    @property
    def key(self):
        return (self.seed, self.W, self.snr)


@dataclass
class SweepResult:
    rows: list
    config: ExperimentConfig = None

    @property
    def errors(self):
        return [r for r in self.rows if r.error is not None]

    def by_cell(self):
        return {r.key: r for r in self.rows}

    def medians(self, W, snr):
        vals = [r.regret for r in self.rows if r.W == W and r.snr == snr and r.error is None]
        return float(np.median(vals)) if vals else math.nan


def _seed_job(args):
    """All cells of one seed; the instance, offline policy and per-W gains are shared."""
    seed, config = args
    tol = config.tolerances
    rows = []
    try:
        sys, costs, bounds, trace = generate_instance(seed, config.T, config.profile)
        consts = stability_constants(sys, bounds, tol=tol)
        policy = build_offline_policy(sys, costs, tol)
        J_star = optimal_rollout(policy, trace).J
    except LQRError as exc:
        return [Row(seed, w, r, error=f"{type(exc).__name__}: {exc}")
                for w in sorted(config.W) for r in sorted(config.snr)]
    for W in sorted(config.W):
        W = int(W)
        try:
            start = time.perf_counter()
            gains = mpc_gain_schedule(sys, costs, bounds, W, consts.P_max, policy, tol)
            shared_ms = (time.perf_counter() - start) * 1e3
        except LQRError as exc:
            rows += [Row(seed, W, r, error=f"{type(exc).__name__}: {exc}") for r in sorted(config.snr)]
            continue
        for snr in sorted(config.snr):
            start = time.perf_counter()
            try:
                preds = make_predictions(trace, W, NoiseSpec(snr, config.noise_growth), seed)
                roll = mpc_rollout(sys, costs, bounds, trace, preds, W, consts, policy, tol, gains)
                J_pi = roll.traj.J
                f = theorem1_factors(consts, W, trace, preds, sys)
            except (LQRError, ValueError) as exc:
                rows.append(Row(seed, W, snr, error=f"{type(exc).__name__}: {exc}"))
                continue
            wall = (time.perf_counter() - start) * 1e3 + shared_ms if config.timing else None
            rows.append(Row(seed, W, snr, J_pi, J_star, J_pi - J_star, f.partI_coeff, f.energy_d,
                            f.partII_coeff, f.energy_e, wall))
    return rows


def run_cell(config, seed, W, snr, with_formula=False):
    """Recompute a single cell from scratch (no sharing); used by replay."""
    cfg = replace(config, W=(W,), snr=(snr,), seeds=(seed,), seed_offset=0)
    row = _seed_job((seed, cfg))[0]
    if not with_formula or row.error:
        return row, None
    sys, costs, bounds, trace = generate_instance(seed, cfg.T, cfg.profile)
    policy = build_offline_policy(sys, costs, cfg.tolerances)
    preds = make_predictions(trace, W, NoiseSpec(snr, cfg.noise_growth), seed)
    roll = mpc_rollout(sys, costs, bounds, trace, preds, W, policy=policy, tol=cfg.tolerances)
    return row, regret_formula(roll.traj, policy, trace)


def run_sweep(config):
    jobs = [(s, config) for s in config.effective_seeds]
    if config.jobs == 1 or len(jobs) == 1:
        chunks = [_seed_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(jobs))) as pool:
            chunks = list(pool.map(_seed_job, jobs))
    rows = sorted((r for chunk in chunks for r in chunk), key=lambda r: r.key)
    for r in rows:
        if r.error:
            log.warning("cell seed=%s W=%s snr=%s failed: %s", r.seed, r.W, r.snr, r.error)
    return SweepResult(rows, config)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def format_row(r):
    return ",".join(_fmt(getattr(r, c)) for c in COLUMNS)


def emit_csv(result, path):
    """Write the fixed-header CSV; failed cells are NaN rows listed in ``<path>.errors``."""
    lines = [HEADER] + [format_row(r) for r in result.rows]
    err_path = f"{path}.errors"
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        if result.errors:
            with open(err_path, "w", encoding="utf-8", newline="") as fh:
                fh.write("seed,W,snr,error\n")
                for r in result.errors:
                    fh.write(f"{r.seed},{r.W},{_fmt(r.snr)},{r.error.replace(chr(10), ' ')}\n")
        elif os.path.exists(err_path):
            os.remove(err_path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def parse_row(line):
    """Inverse of ``format_row`` for the fields a replay needs."""
    parts = line.strip().split(",")
    if len(parts) != len(COLUMNS):
        raise ConfigError(f"expected {len(COLUMNS)} comma-separated fields, got {len(parts)}")
    if parts == COLUMNS:
        raise ConfigError("that is the header line, not a data row")
    rec = dict(zip(COLUMNS, parts))
    try:
        out = {"seed": int(rec["seed"]), "W": int(rec["W"]), "snr": float(rec["snr"])}
        for c in COLUMNS[3:-1]:
            out[c] = float(rec[c])
    except ValueError as exc:
        raise ConfigError(f"malformed row: {exc}") from exc
    return out


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        if head != HEADER:
            raise ConfigError(f"{path} does not start with the sweep header")
        return [parse_row(line) for line in fh if line.strip()]
