"""Dynamic regret of model predictive control for LQR with disturbance forecasts."""

from .errors import LQRError
from .model import (CostBounds, CostSchedule, DisturbanceTrace, LinearSystem, NoiseSpec, PredictionStream,
                    generate_instance, make_predictions, paper_profile)
from .mpc import mpc_rollout
from .offline import build_offline_policy, optimal_rollout
from .regret import dynamic_regret
from .riccati import solve_dare, stability_constants

__version__ = "0.1.0"
