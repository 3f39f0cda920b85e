"""Kernel-based LMI synthesis of value functions for control-affine optimal control."""

from .errors import BlowUpError, HJBKError, InputError, NumericalError, SynthesisError
from .kernel import CenterSet, KernelFamily, KernelSpec
from .riccati import RiccatiSolution, solve_are
from .simulate import SimulationConfig, SimulationResult, run_batch
from .synthesis import CollocationGrid, SolverSettings, ValueFunction, synthesize
from .system import SystemModel, builtin, linearize

__version__ = "0.1.0"

__all__ = [
    "BlowUpError",
    "CenterSet",
    "CollocationGrid",
    "HJBKError",
    "InputError",
    "KernelFamily",
    "KernelSpec",
    "NumericalError",
    "RiccatiSolution",
    "SimulationConfig",
    "SimulationResult",
    "SolverSettings",
    "SynthesisError",
    "SystemModel",
    "ValueFunction",
    "builtin",
    "linearize",
    "run_batch",
    "solve_are",
    "synthesize",
]
