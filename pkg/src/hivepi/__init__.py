"""Spatial HIV epidemic model with multi-source Bayesian calibration."""

from .engine import (
    EpidemicCoefficients,
    EpidemicModel,
    EpidemicState,
    NaturalHistory,
    ProjectionError,
    Trajectories,
    project,
)
from .graph import RegionGraph, build_graph, close_set, mixing_weights, read_graph_csv
from .kernels import BACKEND
from .observation import (
    BinomialData,
    CountData,
    ObservationSet,
    negbinom3_logpmf,
    negbinom3_sample,
    read_observations,
    recent_fraction,
    seek_probabilities,
    total_loglik,
)
from .splines import BasisSpec, make_basis

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BasisSpec", "BinomialData", "CountData", "EpidemicCoefficients", "EpidemicModel",
    "EpidemicState", "NaturalHistory", "ObservationSet", "ProjectionError", "RegionGraph",
    "Trajectories", "build_graph", "close_set", "make_basis", "mixing_weights", "negbinom3_logpmf",
    "negbinom3_sample", "project", "read_graph_csv", "read_observations", "recent_fraction",
    "seek_probabilities", "total_loglik",
]
