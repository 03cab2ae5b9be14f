"""Spatial causal inference toolkit.

Areal CAR models with propensity-score and joint adjustments for spatial
confounding, interference estimands, spatiotemporal estimators and
point-referenced methods, plus a simulation harness and CLI.
"""
from .confound import CausalEstimate, ModelSpec, fit_model
from .data import ArealDataset, PanelDataset, PointDataset, RunConfig, parse_config
from .lattice import CarParams, Lattice, SarParams, build_rook_grid
from .mcmc import PosteriorSummary, run_chain

__all__ = [
    "ArealDataset",
    "CarParams",
    "CausalEstimate",
    "Lattice",
    "ModelSpec",
    "PanelDataset",
    "PointDataset",
    "PosteriorSummary",
    "RunConfig",
    "SarParams",
    "build_rook_grid",
    "fit_model",
    "parse_config",
    "run_chain",
]
__version__ = "0.1.0"
