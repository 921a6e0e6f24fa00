"""Markov generators of Ising spin lattices coupled to a boson bath in the
stochastic limit, with master-equation, trajectory and kinetic Monte Carlo
solvers."""

__version__ = "0.1.0"

from .bath import BathModel, FlatDensity, OhmicDensity, TabulatedDensity, susceptibility, transition_rates
from .classical import (
    ClassicalRateModel,
    detailed_balance_check,
    diagonal_invariance_check,
    extract_rates,
    gillespie,
    nearest_neighbor_preset,
)
from .dynamics import DensityOperator, evolve_master, heisenberg_expectation, initial_state, run_trajectories, steady_state
from .generator import assemble_bundle, liouvillian, schrodinger_generator, theta_zero
from .lattice import CouplingGraph, SpinConfiguration, build_lattice, enumerate_channels, grid, path, ring
from .operators import LocalOperator, build_F, build_G

__all__ = [
    "BathModel", "FlatDensity", "OhmicDensity", "TabulatedDensity", "susceptibility", "transition_rates",
    "ClassicalRateModel", "detailed_balance_check", "diagonal_invariance_check", "extract_rates", "gillespie",
    "nearest_neighbor_preset", "DensityOperator", "evolve_master", "heisenberg_expectation", "initial_state", "run_trajectories",
    "steady_state", "assemble_bundle", "liouvillian", "schrodinger_generator", "theta_zero", "CouplingGraph",
    "SpinConfiguration", "build_lattice", "enumerate_channels", "grid", "path", "ring", "LocalOperator",
    "build_F", "build_G",
]
