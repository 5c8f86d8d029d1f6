"""DC-OPF market clearing and price-anticipatory spatial load shifting."""

__version__ = "0.1.0"

from .bilevel import BilevelInfeasible, BilevelSolution, brute_force_oracle, build_single_level, solve_bilevel
from .dcopf import InfeasibleMarket, clear_market, stakeholder_ledger, value_function
from .flexibility import FlexibilitySet, build_box_with_balance, contains, grid_points
from .grid import LoadProfile, Network, load_network_file, load_rts_dataset, three_zone
from .lp import LinearProgram, SolverConfig, solve_lp
from .regimes import classify_alignment, extract_active_set, is_on_boundary, merit_order_report
from .runner import RunConfig, aggregate, run, run_hour

__all__ = [
    "BilevelInfeasible",
    "BilevelSolution",
    "FlexibilitySet",
    "InfeasibleMarket",
    "LinearProgram",
    "LoadProfile",
    "Network",
    "RunConfig",
    "SolverConfig",
    "aggregate",
    "brute_force_oracle",
    "build_box_with_balance",
    "build_single_level",
    "classify_alignment",
    "clear_market",
    "contains",
    "extract_active_set",
    "grid_points",
    "is_on_boundary",
    "load_network_file",
    "load_rts_dataset",
    "merit_order_report",
    "run",
    "run_hour",
    "solve_bilevel",
    "solve_lp",
    "stakeholder_ledger",
    "three_zone",
    "value_function",
]
