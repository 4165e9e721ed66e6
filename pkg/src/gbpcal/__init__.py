"""Distributed Gaussian belief propagation for multi-robot localisation with
online extrinsic calibration of sensors and markers."""

from .baselines import SolverError, SolverReport, solve_block_gs, solve_block_sor, solve_lm
from .distsim import ChannelModel, NoiseConfig, SimConfig, Simulation, generate_world, run_scenario
from .gaussian import CanonicalGaussian, marginalize
from .graph import FactorGraph, GbpMessage, iterate, total_energy
from .manifold import ManifoldPoint
from .metrics import MetricsRecord, rmse_are, rmse_ate
from .mrclam import MrClamDataset, load_mrclam, run_mrclam

__version__ = "0.1.0"

__all__ = [
    "CanonicalGaussian", "ChannelModel", "FactorGraph", "GbpMessage", "ManifoldPoint",
    "MetricsRecord", "MrClamDataset", "NoiseConfig", "SimConfig", "Simulation", "SolverError",
    "SolverReport", "generate_world", "iterate", "load_mrclam", "marginalize", "rmse_are",
    "rmse_ate", "run_mrclam", "run_scenario", "solve_block_gs", "solve_block_sor", "solve_lm",
    "total_energy",
]
