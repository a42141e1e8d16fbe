"""Relative-performance CRRA mean-field game with Hawkes contagious jumps."""
from .model import (AgentType, ConfigError, JumpRateFn, MeanFieldParams, PopulationSpec, RunConfig,
                    load_config, default_params)
from .meanfield import NumericalError, solve_equilibrium, solve_phi
from .hawkes import simulate_hawkes
from .market import build_nash_profile, estimate_objective, simulate_market
from .verify import fit_loglog_slope

__version__ = "0.1.0"
