"""Posterior assembly, MAP fitting, adaptive Metropolis sampling and summaries."""

from .diagnostics import bulk_ess, split_rhat
from .mcmc import Samples, SamplerOptions, sample_posterior
from .optimize import MapOptions, MapResult, map_fit
from .params import ParameterLayout, ParameterVector
from .posterior import Posterior, finite_difference_gradient
from .summary import PosteriorSummary, summarize

__all__ = [
    "MapOptions", "MapResult", "ParameterLayout", "ParameterVector", "Posterior", "PosteriorSummary",
    "Samples", "SamplerOptions", "bulk_ess", "finite_difference_gradient", "map_fit",
    "sample_posterior", "split_rhat", "summarize",
]
