"""Storage aggregators learning to bid into a nodal market, at population scale."""
from .analysis import (LipschitzEstimates, compare_with_baseline, daily_cost, demand_shape_report,
                       estimate_contraction, imv, trace_imv, verify_mfe)
from .beliefs import BeliefVector, update_belief
from .io import __version__, load_scenario, read_trace, write_scenario, write_trace
from .network import EDSolution, GeneratorSpec, Infeasible, LineSpec, Network, compute_lmps, solve_ed
from .simulator import SimulationConfig, SimulationTrace, run_mfe_iteration, run_simulation

__all__ = [
    "BeliefVector", "EDSolution", "GeneratorSpec", "Infeasible", "LineSpec", "LipschitzEstimates", "Network",
    "SimulationConfig", "SimulationTrace", "compare_with_baseline", "compute_lmps", "daily_cost",
    "demand_shape_report", "estimate_contraction", "imv", "load_scenario", "read_trace", "run_mfe_iteration",
    "run_simulation", "solve_ed", "trace_imv", "update_belief", "verify_mfe", "write_scenario", "write_trace",
    "__version__",
]
