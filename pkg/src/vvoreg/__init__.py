"""Regression-based decentralized reactive power control for radial feeders."""

from .feeder import Bus, FeederError, FeederModel, InverterSpec, Line, parse_feeder, validate_radial
from .powerflow import Injections, PowerFlowSolution, solve_powerflow
from .opf import OpfConfig, OpfSolution, solve_opf, solve_opf_batch
from .scenarios import ScenarioSet, SyntheticConfig, generate_synthetic, load_scenarios
from .regression import RegressionModel, predict, stepwise_select
from .control import ControllerSpec, LtcConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "Bus", "Line", "InverterSpec", "FeederModel", "FeederError", "parse_feeder", "validate_radial",
    "Injections", "PowerFlowSolution", "solve_powerflow",
    "OpfConfig", "OpfSolution", "solve_opf", "solve_opf_batch",
    "ScenarioSet", "SyntheticConfig", "generate_synthetic", "load_scenarios",
    "RegressionModel", "predict", "stepwise_select",
    "ControllerSpec", "LtcConfig", "simulate",
]
