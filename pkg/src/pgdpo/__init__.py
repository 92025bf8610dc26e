"""Pontryagin-guided direct policy optimization for dynamic portfolio choice.

Train neural portfolio policies by backpropagating through simulated wealth
paths, read the Pontryagin costates out of the same backward pass, and
project them through the first-order optimality conditions.  An affine
Riccati benchmark and a terminal-matching value solver provide the ground
truth and the comparison baseline.
"""

from .bsde import BsdeNets, bsde_candidate, train_bsde
from .cli import ExperimentConfig, main, parse_config, run
from .costates import (
    CostateEstimate,
    PolicyDecomposition,
    estimate_costates,
    project_on_grid,
    project_policy,
    projection_candidate,
)
from .evaluation import PolicyCandidate, hedging_ratio, report, rmse_slices
from .market import MarketParams, generate_params, with_beta_norm
from .riccati import build_grid, kim_omberg_scalar, solve_riccati
from .train import TrainConfig, TrainTrace, train_baseline, train_residual

__version__ = "0.1.0"

__all__ = [
    "BsdeNets",
    "CostateEstimate",
    "ExperimentConfig",
    "MarketParams",
    "PolicyCandidate",
    "PolicyDecomposition",
    "TrainConfig",
    "TrainTrace",
    "bsde_candidate",
    "build_grid",
    "estimate_costates",
    "generate_params",
    "hedging_ratio",
    "kim_omberg_scalar",
    "main",
    "parse_config",
    "project_on_grid",
    "project_policy",
    "projection_candidate",
    "report",
    "rmse_slices",
    "run",
    "solve_riccati",
    "train_baseline",
    "train_residual",
    "with_beta_norm",
]
