import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpcregret.model import CostBounds, CostSchedule, DisturbanceTrace, LinearSystem, generate_instance, paper_profile
from mpcregret.offline import build_offline_policy
from mpcregret.riccati import stability_constants

settings.register_profile("lab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


def random_spd(rng, n, lo=0.5, hi=3.0):
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (V * rng.uniform(lo, hi, n)) @ V.T


def random_system(seed, n=3, n_u=1, n_d=2, T=30, q=(1.0, 2.0), r=(0.5, 1.5)):
    """Generic instance with random dynamics; costs are random SPD inside scaled-identity bounds."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) / np.sqrt(n) * 1.1
    B_u = rng.standard_normal((n, n_u))
    B_d = rng.standard_normal((n, n_d))
    Q = np.array([random_spd(rng, n, *q) for _ in range(T)])
    R = np.array([random_spd(rng, n_u, *r) for _ in range(T - 1)])
    bounds = CostBounds(q[0] * np.eye(n), q[1] * np.eye(n), r[0] * np.eye(n_u), r[1] * np.eye(n_u))
    trace = DisturbanceTrace(rng.standard_normal((T - 1, n_d)), rng.standard_normal(n))
    return LinearSystem(A, B_u, B_d), CostSchedule(Q, R), bounds, trace


class Inst:
    """Bundle of one instance with its offline policy and constants."""

    def __init__(self, sys, costs, bounds, trace):
        self.sys, self.costs, self.bounds, self.trace = sys, costs, bounds, trace
        self.policy = build_offline_policy(sys, costs)
        self.sc = stability_constants(sys, bounds)

    @property
    def T(self):
        return self.costs.T


def paper_inst(seed, T):
    return Inst(*generate_instance(seed, T))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def paper20():
    return paper_inst(7, 20)


@pytest.fixture(scope="session")
def paper60():
    return paper_inst(11, 60)


@pytest.fixture(scope="session")
def paper_sys():
    return paper_profile().system
