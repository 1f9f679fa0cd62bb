"""Steady-state diffusion surrogates: ground-truth generation, an encoder-decoder
CNN with weighted losses, and region-wise evaluation."""

from .lattice import (FieldGrid, LatticeSpec, RegionSet, Source, SourceConfig, area_fractions,
                      compute_region_masks, rasterize_sources)
from .solver import SolverSettings, residual_norm, solve_steady, time_march_oracle
from .losses import LossSpec, loss_gradient, weighted_loss
from .network import NetConfig, SurrogateNet

__version__ = "0.1.0"

__all__ = [
    "FieldGrid", "LatticeSpec", "RegionSet", "Source", "SourceConfig", "area_fractions",
    "compute_region_masks", "rasterize_sources", "SolverSettings", "residual_norm",
    "solve_steady", "time_march_oracle", "LossSpec", "loss_gradient", "weighted_loss",
    "NetConfig", "SurrogateNet",
]
