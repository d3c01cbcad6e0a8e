"""Budget-constrained city-level subsidy control with a prefix-conditional
diffusion planner and an inverse-dynamics decoder."""

from .controller import ControllerState, Planner, decide, run_day
from .core import Context, MarketState, PairEconomics, SeededRng, Trajectory, augment_state
from .dual_map import DualParams, closed_form_subsidy, general_subsidy, map_window_subsidies
from .estimators import FixedLambdaPolicy, SubsidyPlanner
from .evaluation import BehaviorCloning, EvalReport, paired_compare, score

__all__ = [
    "BehaviorCloning",
    "Context",
    "ControllerState",
    "DualParams",
    "EvalReport",
    "FixedLambdaPolicy",
    "MarketState",
    "PairEconomics",
    "Planner",
    "SeededRng",
    "SubsidyPlanner",
    "Trajectory",
    "augment_state",
    "closed_form_subsidy",
    "decide",
    "general_subsidy",
    "map_window_subsidies",
    "paired_compare",
    "run_day",
    "score",
]

__version__ = "0.1.0"
