import csv

import numpy as np
import pytest

from conftest import Inst, paper_inst, random_system
from mpcregret.errors import BranchError, DimensionError, InstanceMismatchError, PredictionWindowError
from mpcregret.linalg import lam_min, opnorm
from mpcregret.model import CostBounds, CostSchedule, DisturbanceTrace, NoiseSpec, accurate_predictions, make_predictions
from mpcregret.mpc import (EXACT_TAIL, WINDOWED, mpc_action, mpc_gain_schedule, mpc_gains_at, mpc_qp_crosscheck,
                           mpc_rollout, tail_gains_at, write_gains_dump, write_rollout_csv)
from mpcregret.offline import build_offline_policy, optimal_rollout
from mpcregret.riccati import riccati_recursion


def rollout(inst, W, snr=0.0, seed=0):
    preds = make_predictions(inst.trace, W, NoiseSpec(snr), seed)
    return mpc_rollout(inst.sys, inst.costs, inst.bounds, inst.trace, preds, W, inst.sc, inst.policy)


def test_branch_error_outside_window(paper20):
    with pytest.raises(BranchError):
        mpc_gains_at(15, paper20.sys, paper20.costs, paper20.bounds, 5)
    with pytest.raises(BranchError):
        mpc_gains_at(0, paper20.sys, paper20.costs, paper20.bounds, 0)
    with pytest.raises(BranchError):
        tail_gains_at(3, paper20.policy, 5)


def test_window_zero_gains(paper20):
    sys, costs, P = paper20.sys, paper20.costs, paper20.sc.P_max
    for t in (1, 10, 19):
        g = mpc_gains_at(t, sys, costs, paper20.bounds, 0, P)
        S = costs.R[t - 1] + sys.B_u.T @ P @ sys.B_u
        assert np.allclose(g.Kd_at(t), np.linalg.solve(S, sys.B_u.T @ P), atol=1e-14)
        assert np.allclose(g.Kbar, np.linalg.solve(S, sys.B_u.T @ P @ sys.A), atol=1e-14)
        assert np.array_equal(g.Pbar[-1], P)


def test_local_pass_matches_generic_recursion(paper60):
    inst = paper60
    for W in (0, 3, 10):
        for t in (1, 17, 60 - W - 1):
            g = mpc_gains_at(t, inst.sys, inst.costs, inst.bounds, W, inst.sc.P_max)
            ref = riccati_recursion(inst.costs.Q[t - 1 : t + W], inst.costs.R[t - 1 : t + W], inst.sc.P_max,
                                    inst.sys, start=t)
            assert np.allclose(g.Pbar, ref.P, atol=1e-12)
            assert np.allclose(g.Kbar_local, ref.K, atol=1e-12)
            for i in range(t, t + W + 1):
                S = inst.costs.R[t - 1] + inst.sys.B_u.T @ g.P_at(t + 1) @ inst.sys.B_u
                Kd = np.linalg.solve(S, inst.sys.B_u.T @ g.Phibar(i + 1, t + 1).T @ g.P_at(i + 1))
                assert np.allclose(g.Kd_at(i), Kd, atol=1e-12)


def test_schedule_equals_per_stage_gains(paper60):
    inst = paper60
    sched = mpc_gain_schedule(inst.sys, inst.costs, inst.bounds, 7, inst.sc.P_max, inst.policy)
    for t in (1, 30, 52):
        g = mpc_gains_at(t, inst.sys, inst.costs, inst.bounds, 7, inst.sc.P_max)
        assert np.array_equal(g.Kbar_d, sched[t - 1].Kbar_d)
        assert np.array_equal(g.Pbar, sched[t - 1].Pbar)
    assert [g.branch for g in sched] == [WINDOWED] * 52 + [EXACT_TAIL] * 7


def test_constant_max_costs_stay_at_fixed_point(paper_sys):
    bounds = CostBounds(2 * np.eye(2), 3 * np.eye(2), [[5.0]], [[6.0]])
    inst = Inst(paper_sys, CostSchedule.constant(3 * np.eye(2), [[6.0]], 30),
                bounds, DisturbanceTrace(np.zeros((29, 1)), np.ones(2)))
    g = mpc_gains_at(4, inst.sys, inst.costs, bounds, 6, inst.sc.P_max)
    for P in g.Pbar:
        assert np.allclose(P, inst.sc.P_max, atol=1e-10)


def test_value_gap_bound_window_ten(paper60):
    inst, W = paper60, 10
    sc = inst.sc
    for t in range(1, 60 - W):
        g = mpc_gains_at(t, inst.sys, inst.costs, inst.bounds, W, sc.P_max)
        for i in range(t, t + W + 1):
            gap = opnorm(g.P_at(i + 1) - inst.policy.P(i + 1))
            assert gap <= sc.value_gap_bound(t + W - i) + 1e-12


def test_predicted_quantities_bounded(paper60):
    inst, W = paper60, 6
    sc = inst.sc
    c1 = sc.gain_bound(inst.sys)
    for t in range(1, 60 - W):
        g = mpc_gains_at(t, inst.sys, inst.costs, inst.bounds, W, sc.P_max)
        for P in g.Pbar:
            assert lam_min(P - inst.bounds.Q_min) >= -1e-9 and lam_min(sc.P_max - P) >= -1e-9
        for i in range(t, t + W + 2):
            for j in range(i, t + W + 2):
                assert opnorm(g.Phibar(j, i)) <= sc.tau * sc.rho ** (j - i) + 1e-9
        for i in range(t, t + W + 1):
            assert opnorm(g.Kd_at(i)) <= c1 * sc.rho ** (i - t) + 1e-9


def test_zero_state_and_forecast_gives_zero_action(paper20):
    trace = DisturbanceTrace(np.zeros((19, 1)), np.zeros(2))
    preds = accurate_predictions(trace, 4)
    g = mpc_gains_at(2, paper20.sys, paper20.costs, paper20.bounds, 4, paper20.sc.P_max)
    assert np.all(mpc_action(2, np.zeros(2), preds, g) == 0)
    assert np.all(mpc_qp_crosscheck(2, np.zeros(2), preds, paper20.sys, paper20.costs, paper20.bounds, 4) == 0)


def test_action_matches_quadratic_program(rng):
    for seed in range(4):
        inst = Inst(*random_system(seed, T=25))
        for W in (0, 1, 4, 12, 24):
            preds = make_predictions(inst.trace, W, NoiseSpec(0.5), seed)
            sched = mpc_gain_schedule(inst.sys, inst.costs, inst.bounds, W, inst.sc.P_max, inst.policy)
            for t in rng.integers(1, 25, size=5):
                x = rng.standard_normal(inst.sys.n) * 3
                u = mpc_action(int(t), x, preds, sched[t - 1])
                ref = mpc_qp_crosscheck(int(t), x, preds, inst.sys, inst.costs, inst.bounds, W, inst.sc.P_max)
                assert np.allclose(u, ref, atol=1e-8 * (1 + np.abs(ref).max()))


def test_full_window_reproduces_optimal_trajectory():
    for seed in range(3):
        inst = paper_inst(seed, 25)
        for W in (24, 30):
            roll = rollout(inst, W)
            assert set(roll.branches) == {EXACT_TAIL}
            opt = optimal_rollout(inst.policy, inst.trace)
            assert np.allclose(roll.traj.x, opt.x, atol=1e-12)
            assert abs(roll.traj.J - opt.J) <= 1e-9 * (1 + abs(opt.J))


def test_branch_partition(paper20):
    for W in (0, 3, 10, 18, 19):
        roll = rollout(paper20, W)
        for t, b in enumerate(roll.branches, start=1):
            assert (b == EXACT_TAIL) == (t > 20 - W - 1)


def test_longer_window_helps_on_median():
    J1, J8 = [], []
    for seed in range(20):
        inst = paper_inst(seed, 60)
        J1.append(rollout(inst, 1).traj.J)
        J8.append(rollout(inst, 8).traj.J)
    assert np.median(J8) <= np.median(J1)


def test_closed_loop_transition_bound(paper60):
    roll = rollout(paper60, 5, snr=0.3)
    sc = paper60.sc
    for t0 in range(1, 61):
        table = roll.phi_mpc_table(t0)
        for k, M in enumerate(table):
            assert opnorm(M) <= sc.tau * sc.rho**k + 1e-9
    assert np.allclose(roll.phi_mpc(30, 10), roll.phi_mpc_table(10)[20], atol=0)


def test_closed_loop_state_bounded():
    for seed in range(10):
        inst = paper_inst(seed, 80)
        sc = inst.sc
        roll = rollout(inst, 4)
        c1 = sc.gain_bound(inst.sys)
        nBd = opnorm(inst.sys.B_d)
        C = sc.tau / (1 - sc.rho) * nBd * (1 + opnorm(inst.sys.B_u) * c1 / (1 - sc.rho))
        bound = sc.tau * np.linalg.norm(inst.trace.x1) + C * np.abs(inst.trace.d).max()
        assert np.linalg.norm(roll.traj.x, axis=1).max() <= bound


def test_rollout_input_checks(paper20):
    preds = accurate_predictions(paper20.trace, 2)
    with pytest.raises(DimensionError):
        mpc_rollout(paper20.sys, paper20.costs, paper20.bounds, paper20.trace, preds, 4)
    other = paper_inst(99, 20)
    with pytest.raises(InstanceMismatchError):
        mpc_rollout(paper20.sys, paper20.costs, paper20.bounds, other.trace, preds, 2)
    g = mpc_gains_at(3, paper20.sys, paper20.costs, paper20.bounds, 2)
    with pytest.raises(BranchError):
        mpc_action(4, np.zeros(2), preds, g)
    short = accurate_predictions(paper20.trace, 1)
    with pytest.raises((PredictionWindowError, BranchError)):
        mpc_action(3, np.zeros(2), short, g)


def test_exports(tmp_path, paper20):
    roll = rollout(paper20, 3, 0.2)
    path = tmp_path / "roll.csv"
    write_rollout_csv(path, roll)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "branch", "x1", "x2", "u1", "stage_cost"]
    assert [r[1] for r in rows[1:]] == roll.branches + ["terminal"]
    dump = tmp_path / "gains.txt"
    write_gains_dump(dump, roll)
    text = dump.read_text()
    assert text.count("stage ") == 19 and "Kbar_d 5 " in text


def test_condensed_and_kkt_forms_agree_on_well_conditioned_systems(paper60, rng):
    preds = make_predictions(paper60.trace, 8, NoiseSpec(0.4), 1)
    for t in (1, 20, 51, 55):
        x = rng.standard_normal(2)
        a = mpc_qp_crosscheck(t, x, preds, paper60.sys, paper60.costs, paper60.bounds, 8, paper60.sc.P_max)
        b = mpc_qp_crosscheck(t, x, preds, paper60.sys, paper60.costs, paper60.bounds, 8, paper60.sc.P_max,
                              method="condensed")
        assert np.allclose(a, b, atol=1e-10)
    with pytest.raises(ValueError):
        mpc_qp_crosscheck(1, np.zeros(2), preds, paper60.sys, paper60.costs, paper60.bounds, 8, method="x")
