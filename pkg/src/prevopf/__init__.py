"""DC-OPF learning with preventive limit calibration.

Bundled cases: ``case30`` and ``case118`` (see ``prevopf.grid.case_path``).
"""

from .calibration import (
    CalibrationPlan,
    SensitivityMatrix,
    apply_plan,
    compute_sensitivity,
    plan_from_epsilon,
    plan_from_percent,
    worst_case_error_bound,
)
from .dataset import TrainingDataset, generate_dataset, generate_split, sample_loads
from .grid import PowerNetwork, build_admittance, parse_case
from .mlp import MlpModel, PenaltyOperator, TrainConfig, load_model, save_model, train
from .pipeline import OracleModel, PredictionResult, Predictor, check_feasibility, predict
from .solver import DcOpfProblem, DispatchSolution, Limits, SolverOptions, l1_project, solve_dcopf

__version__ = "0.1.0"

__all__ = [
    "CalibrationPlan", "SensitivityMatrix", "apply_plan", "compute_sensitivity", "plan_from_epsilon",
    "plan_from_percent", "worst_case_error_bound", "TrainingDataset", "generate_dataset", "generate_split",
    "sample_loads", "PowerNetwork", "build_admittance", "parse_case", "MlpModel", "PenaltyOperator",
    "TrainConfig", "load_model", "save_model", "train", "OracleModel", "PredictionResult", "Predictor",
    "check_feasibility", "predict", "DcOpfProblem", "DispatchSolution", "Limits", "SolverOptions",
    "l1_project", "solve_dcopf",
]
