"""Federated survival forests: one-round federated random survival forests."""

from .cox import CoxModel, FedAvgConfig, fedavg_cox, fit_cox
from .datasets import load_gbsg2
from .federation import FederationConfig, fedsurf_round, run_fedsurf, setup_clients
from .forest import Forest, ForestParams, fit_forest
from .metrics import EvalContext, MetricsReport, evaluate_model
from .survival import StepFunction, SurvivalDataset, kaplan_meier, load_csv, nelson_aalen

__all__ = [
    "CoxModel",
    "EvalContext",
    "FedAvgConfig",
    "FederationConfig",
    "Forest",
    "ForestParams",
    "MetricsReport",
    "StepFunction",
    "SurvivalDataset",
    "evaluate_model",
    "fedavg_cox",
    "fedsurf_round",
    "fit_cox",
    "fit_forest",
    "kaplan_meier",
    "load_csv",
    "load_gbsg2",
    "nelson_aalen",
    "run_fedsurf",
    "setup_clients",
]

__version__ = "0.1.0"
