"""Stochastic flows of diffeomorphisms driven by finite mode families.

Simulation, controlled flows, endpoint rate functions, small-noise Laplace
experiments and diffeomorphic template matching.
"""

from .control_flow import ControlPath, control_cost, solve_controlled_flow
from .errors import (BlowUpError, ConfigurationError, ConstructionError, StochFlowError,
                     UnderflowError)
from .flow_sim import NoisePath, check_flow_property, flow_distance, jacobian_flow, simulate_flow
from .kernels import BasisFamily, basis_from_config, evaluate_covariance, validate_basis
from .trajectory import FlowTrajectory

__version__ = "0.1.0"

__all__ = [
    "BasisFamily", "basis_from_config", "evaluate_covariance", "validate_basis",
    "ControlPath", "control_cost", "solve_controlled_flow",
    "NoisePath", "simulate_flow", "jacobian_flow", "check_flow_property", "flow_distance",
    "FlowTrajectory",
    "StochFlowError", "ConfigurationError", "ConstructionError", "BlowUpError",
    "UnderflowError",
]
