"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from conftest import Inst, paper_inst, random_spd, random_system
from mpcregret.harness import config_from_dict, emit_csv, run_sweep
from mpcregret.linalg import opnorm
from mpcregret.model import NoiseSpec, accurate_predictions, make_predictions, paper_profile
from mpcregret.mpc import mpc_action, mpc_gain_schedule, mpc_qp_crosscheck, mpc_rollout
from mpcregret.offline import build_lifted, optimal_rollout, qp_oracle
from mpcregret.regret import decompose_action_errors, dynamic_regret, regret_formula
from mpcregret.riccati import (delta_inf, explicit_constants, metric_diameter, norm_from_metric_bound, riccati_step,
                               stability_constants)


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


def _rollout(inst, W, snr=0.0, seed=0):
    preds = make_predictions(inst.trace, W, NoiseSpec(snr), seed)
    return mpc_rollout(inst.sys, inst.costs, inst.bounds, inst.trace, preds, W, inst.sc, inst.policy)


def test_c01_regret_formula_exact(verdict):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        inst = paper_inst(seed, 40)
        J_star = optimal_rollout(inst.policy, inst.trace).J
        for W in (0, 2, 5):
            for snr in (0.0, 0.3):
                roll = _rollout(inst, W, snr, seed)
                gap = abs((roll.traj.J - J_star) - regret_formula(roll, inst.policy, inst.trace))
                worst = max(worst, gap / (1 + abs(J_star)))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-8 and elapsed < 10,
            f"regret formula: max scaled gap {worst:.2e} (tol 1e-8), {elapsed:.2f}s (limit 10s)")


def test_c02_oracle_agreement(verdict):
    worst_J = 0.0
    for seed in range(30):
        inst = paper_inst(seed, 5 + seed % 16)
        J_roll = optimal_rollout(inst.policy, inst.trace).J
        J_lift = build_lifted(inst.sys, inst.costs).value(1, inst.trace.x1, inst.trace)
        _, J_qp = qp_oracle(inst.sys, inst.costs, inst.trace)
        worst_J = max(worst_J, abs(J_lift - J_roll) / abs(J_roll), abs(J_qp - J_roll) / abs(J_roll))
    rng = np.random.default_rng(2024)
    worst_u, probes = 0.0, 0
    while probes < 200:
        seed = probes // 10
        inst = paper_inst(1000 + seed, 40) if seed % 2 else Inst(*random_system(seed, T=40))
        W = int(rng.integers(0, 45))
        preds = make_predictions(inst.trace, W, NoiseSpec(float(rng.uniform(0, 1))), seed)
        sched = mpc_gain_schedule(inst.sys, inst.costs, inst.bounds, W, inst.sc.P_max, inst.policy)
        for _ in range(10):
            t = int(rng.integers(1, 40))
            x = 3 * rng.standard_normal(inst.sys.n)
            u = mpc_action(t, x, preds, sched[t - 1])
            ref = mpc_qp_crosscheck(t, x, preds, inst.sys, inst.costs, inst.bounds, W, inst.sc.P_max)
            worst_u = max(worst_u, float(np.abs(u - ref).max()))
            probes += 1
    verdict(2, worst_J <= 1e-6 and worst_u <= 1e-8,
            f"three-way J* max rel gap {worst_J:.2e} (tol 1e-6); MPC vs QP over {probes} probes {worst_u:.2e} (tol 1e-8)")


def test_c03_full_window_collapse(verdict):
    worst, count = 0.0, 0
    for seed in range(20):
        T = 10 + seed
        inst = paper_inst(seed, T) if seed % 2 else Inst(*random_system(seed, T=T))
        for W in (T - 1, T + 3):
            rep = dynamic_regret(mpc_rollout(inst.sys, inst.costs, inst.bounds, inst.trace,
                                             accurate_predictions(inst.trace, W), W, inst.sc, inst.policy),
                                 inst.policy, inst.trace, decompose=False)
            worst = max(worst, abs(rep.regret) / (1 + abs(rep.J_star)))
            count += 1
    verdict(3, worst <= 1e-9, f"W >= T-1 accurate: max scaled regret {worst:.2e} over {count} cases (tol 1e-9)")


def test_c04_regret_decays_with_window(verdict):
    cfg = config_from_dict({"seeds": 20, "T": 200, "W": list(range(1, 11)), "snr": [0.0]})
    start = time.perf_counter()
    res = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    med = [res.medians(W, 0.0) for W in range(1, 11)]
    decreasing = all(b < a for a, b in zip(med, med[1:]))
    ratio = med[-1] / med[0]
    verdict(4, decreasing and ratio <= 0.1 and elapsed < 60 and not res.errors,
            f"medians W=1..10 strictly decreasing={decreasing}, med(10)/med(1)={ratio:.2e} (limit 0.1), "
            f"{elapsed:.1f}s (limit 60s)")


def test_c05_noise_flattens_benefit(verdict):
    levels = [0.0, 0.1, 0.5, 1.0]
    cfg = config_from_dict({"seeds": 20, "T": 200, "W": list(range(1, 16)), "snr": levels})
    res = run_sweep(cfg)
    bad = []
    for W in range(1, 16):
        med = [res.medians(W, s) for s in levels]
        if not all(b >= a for a, b in zip(med, med[1:])):
            bad.append(W)
    gain = {s: (res.medians(5, s) - res.medians(15, s)) / res.medians(5, s) for s in (0.0, 1.0)}
    verdict(5, not bad and gain[1.0] < gain[0.0] and not res.errors,
            f"snr monotone for all W (violations: {bad}); improvement W=5->15 snr=0: {gain[0.0]:.3f}, "
            f"snr=1: {gain[1.0]:.3f}")


def _fifty_instances():
    for seed in range(25):
        yield paper_inst(seed, 40)
        yield Inst(*random_system(seed, T=30))


def test_c06_exponential_stability(verdict):
    slack = np.inf
    for k, inst in enumerate(_fifty_instances()):
        sc, T = inst.sc, inst.T
        roll = _rollout(inst, 3 + k % 5, 0.3, k)
        for t0 in range(1, T + 1):
            table = roll.phi_mpc_table(t0)
            for t in range(t0, T + 1):
                lim = sc.tau * sc.rho ** (t - t0)
                slack = min(slack, lim - opnorm(inst.policy.phi(t, t0)), lim - opnorm(table[t - t0]))
    verdict(6, slack >= -1e-9, f"transition bounds (offline and MPC) on 50 instances: min slack {slack:.3e}")


def test_c07_gain_decay(verdict):
    slack = np.inf
    for k, inst in enumerate(_fifty_instances()):
        sc, T = inst.sc, inst.T
        c1 = sc.gain_bound(inst.sys)
        for t in range(1, T):
            for i in range(t, T):
                slack = min(slack, c1 * sc.rho ** (i - t) - opnorm(inst.policy.Kd_at(t, i)))
        W = 3 + k % 5
        for g in mpc_gain_schedule(inst.sys, inst.costs, inst.bounds, W, sc.P_max, inst.policy):
            for i in range(g.t, g.last + 1):
                slack = min(slack, c1 * sc.rho ** (i - g.t) - opnorm(g.Kd_at(i)))
    verdict(7, slack >= -1e-9, f"feedforward gain decay (offline and MPC) on 50 instances: min slack {slack:.3e}")


def _in_box(rng, L, U):
    w, V = np.linalg.eigh(U - L)
    root = (V * np.sqrt(np.maximum(w, 0))) @ V.T
    return L + root @ random_spd(rng, L.shape[0], 0.0, 1.0) @ root


def test_c08_contraction(verdict):
    rng = np.random.default_rng(8)
    systems = [(paper_profile().system, paper_inst(0, 5).bounds)] + [random_system(s, n=3, T=3)[::2] for s in range(4)]
    worst_c, worst_10, worst_11 = -np.inf, -np.inf, -np.inf
    for k in range(500):
        sys, bounds = systems[k % len(systems)]
        sc = stability_constants(sys, bounds)
        L, U = bounds.Q_min, sc.P_max
        P, Pb = _in_box(rng, L, U), _in_box(rng, L, U)
        Q, R = _in_box(rng, bounds.Q_min, bounds.Q_max), _in_box(rng, bounds.R_min, bounds.R_max)
        d0 = delta_inf(P, Pb)
        d1 = delta_inf(riccati_step(Q, R, P, sys), riccati_step(Q, R, Pb, sys))
        worst_c = max(worst_c, d1 - sc.gamma * d0)
        c = metric_diameter(L, U)
        worst_10 = max(worst_10, d0 - c)
        worst_11 = max(worst_11, opnorm(P - Pb) - norm_from_metric_bound(U, c, d0))
    verdict(8, worst_c <= 1e-10 and worst_10 <= 1e-12 and worst_11 <= 1e-10,
            f"500 pairs: max contraction excess {worst_c:.2e}, diameter excess {worst_10:.2e}, "
            f"norm-bound excess {worst_11:.2e}")


def test_c09_gain_and_value_differences(verdict):
    slack_P = slack_K = slack_Kd = np.inf
    for seed in range(20):
        inst = paper_inst(seed, 60)
        sc, pol = inst.sc, inst.policy
        k = explicit_constants(inst.sys, inst.bounds, sc)
        for W in range(1, 11):
            sched = mpc_gain_schedule(inst.sys, inst.costs, inst.bounds, W, sc.P_max, pol)
            for t in range(1, 60 - W):
                g = sched[t - 1]
                slack_K = min(slack_K, k["alpha3"] * sc.gamma**W - opnorm(pol.K(t) - g.Kbar))
                for i in range(t, t + W + 1):
                    slack_P = min(slack_P, sc.value_gap_bound(t + W - i) - opnorm(g.P_at(i + 1) - pol.P(i + 1)))
                    lim = k["alpha4"] * sc.gamma ** (W - i + t) * sc.rho ** (i - t)
                    slack_Kd = min(slack_Kd, lim - opnorm(pol.Kd_at(t, i) - g.Kd_at(i)))
    ok = min(slack_P, slack_K, slack_Kd) >= 0
    verdict(9, ok, f"20 instances, W=1..10: min slack value gap {slack_P:.3e}, feedback gap {slack_K:.3e}, "
                   f"feedforward gap {slack_Kd:.3e}")


def test_c10_decomposition_identities(verdict):
    rec = exp = 0.0
    slack = np.inf
    for seed in range(8):
        inst = paper_inst(seed, 40) if seed % 2 else Inst(*random_system(seed, T=40))
        k = explicit_constants(inst.sys, inst.bounds, inst.sc)
        rho = inst.sc.rho
        for W in (2, 5):
            roll = _rollout(inst, W, 0.3, seed)
            rep = dynamic_regret(roll, inst.policy, inst.trace)
            dec = rep.decomposition
            rec = max(rec, float(np.abs(dec.total - rep.action_errors).max()))
            for t in range(1, 41):
                exp = max(exp, float(np.abs(dec.state_expansion(t) - roll.traj.x[t - 1]).max()))
                for i in range(1, min(t + W, 39) + 1):
                    lim = k["c4"] * rho ** (t - i - 1) if i < t else k["c5"] * rho ** (i - t + 1)
                    slack = min(slack, lim - opnorm(dec.M(i, t)))
    verdict(10, rec <= 1e-8 and exp <= 1e-8 and slack >= 0,
            f"action-error reconstruction {rec:.2e}, state expansion {exp:.2e} (tol 1e-8), "
            f"M-bound min slack {slack:.3e}")


def test_c11_lifted_consistency(verdict):
    worst = 0.0
    for seed in range(10):
        inst = paper_inst(seed, 20)
        lift = build_lifted(inst.sys, inst.costs)
        for t in range(1, 21):
            worst = max(worst, opnorm(lift.P(t) - inst.policy.P(t)))
    verdict(11, worst <= 1e-8, f"lifted value vs Riccati P_t on 10 instances T=20: max gap {worst:.2e} (tol 1e-8)")


def test_c12_determinism(verdict, tmp_path):
    base = {"seeds": 5, "T": 80, "W": [0, 2, 5, 9], "snr": [0.0, 0.3, 1.0], "noise_growth": 0.1}
    paths = []
    for k, jobs in enumerate((1, 1, 3)):
        cfg = config_from_dict(dict(base, jobs=jobs))
        paths.append(tmp_path / f"run{k}.csv")
        emit_csv(run_sweep(cfg), paths[-1])
    blobs = [p.read_bytes() for p in paths]
    verdict(12, blobs[0] == blobs[1] == blobs[2],
            f"three runs (jobs 1, 1, 3) byte-identical: {blobs[0] == blobs[1] == blobs[2]}, {len(blobs[0])} bytes")
