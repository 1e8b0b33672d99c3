"""Decentralized microgrid scheduling: exchange ADMM inside model predictive control."""

from .core import EventLog, PenaltyWeights, SmoothingWeights, TimeGrid, smoothing_cost
from .qp import CanonicalQP, QPInfeasibleError, QPSettings, QPSolution, QPStatus, kkt_residuals, solve_qp
from .agents import (
    GridAgent,
    LoadAgent,
    PVAgent,
    StorageAgent,
    prox_grid,
    prox_load,
    prox_pv,
    prox_storage,
    reachability_check,
)
from .exchange import ExchangeError, ExchangeSettings, ExchangeState, rescale_rho, run_exchange
from .forecast import HistoryBuffer, estimate_ev_params, fit_forecast_model, fit_residual_ar, predict
from .reference import solve_centralized
from .scenario import ScenarioConfig, ScenarioData, bundled_scenario_path, load_scenario, realize
from .mpc import MODES, SimulationResult, run
from .metrics import Comparison, MetricsReport, compare, compute_metrics

__version__ = "0.1.0"

__all__ = [
    "CanonicalQP", "Comparison", "EventLog", "ExchangeError", "ExchangeSettings", "ExchangeState",
    "GridAgent", "HistoryBuffer", "LoadAgent", "MODES", "MetricsReport", "PVAgent", "PenaltyWeights",
    "QPInfeasibleError", "QPSettings", "QPSolution", "QPStatus", "ScenarioConfig", "ScenarioData",
    "SimulationResult", "SmoothingWeights", "StorageAgent", "TimeGrid", "bundled_scenario_path", "compare",
    "compute_metrics", "estimate_ev_params", "fit_forecast_model", "fit_residual_ar", "kkt_residuals",
    "load_scenario", "predict", "prox_grid", "prox_load", "prox_pv", "prox_storage", "reachability_check",
    "realize", "rescale_rho", "run", "run_exchange", "smoothing_cost", "solve_centralized", "solve_qp",
]
