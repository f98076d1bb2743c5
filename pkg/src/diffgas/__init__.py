"""Differentiable transient gas-network simulation and optimal gas flow."""

from .adjoint import adjoint_gradient, reverse_sweep, value_and_gradient, vjp_rhs
from .controls import HOUR, ControlSchedule
from .cost import (
    ObjectiveSpec,
    cost_instant,
    cost_total,
    demand_at,
    hourly_mismatch,
    load_demand,
    pressure_penalty,
)
from .errors import (
    DiffGasError,
    DisconnectedNetworkError,
    DomainError,
    NetworkParseError,
    StateValidityError,
    ValidationError,
)
from .grid import DiscreteSystem, discretize, initial_state, rhs
from .model import (
    BAR,
    GasNetwork,
    GasProperties,
    GeneratorCurve,
    Node,
    Pipe,
    bundled_path,
    eos_density,
    eos_pressure,
    load_network,
)
from .opt import (
    OptReport,
    ScenarioSet,
    default_controls,
    lbfgs_box,
    optimize,
    optimize_stochastic,
    project_box,
    sample_scenarios,
)
from .sim import SimConfig, Trajectory, cfl_dt, query_state, run_forward, simulate, step_ssprk3

__version__ = "0.1.0"
