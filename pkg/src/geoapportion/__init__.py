"""Identifiable geometric NMF for multi-pollutant source apportionment."""

__version__ = "0.1.0"

from .apportion import (
    AttributionMatrix, GeometricNMF, IntensityMatrix, LeastSquaresNMF, SourceModel,
    compute_attribution, fit_geometric, fit_model, fit_xray, ls_nmf, solve_intensities,
)
from .geometry import (
    ProfileMatrix, SimplexCloud, VertexSet, find_extreme_points, normalize_rows, polytope_volume,
    prune_vertices, select_max_volume, xray_select,
)
from .ingest import (
    PollutantMatrix, QuantileScaler, ScalingParams, Schema, apply_scaling, derive_size_bins,
    filter_complete, fit_scaling, invert_scaling, parse_table, read_matrix, summarize, write_matrix,
)
from .resample import align_sources, bootstrap, diagnostics, select_k
from .synth import SynthConfig, generate, generate_covariates

__all__ = [
    "AttributionMatrix", "GeometricNMF", "IntensityMatrix", "LeastSquaresNMF", "PollutantMatrix",
    "ProfileMatrix", "QuantileScaler", "ScalingParams", "Schema", "SimplexCloud", "SourceModel",
    "SynthConfig", "VertexSet", "align_sources", "apply_scaling", "bootstrap", "compute_attribution",
    "derive_size_bins", "diagnostics", "filter_complete", "find_extreme_points", "fit_geometric",
    "fit_model", "fit_scaling", "fit_xray", "generate", "generate_covariates", "invert_scaling",
    "ls_nmf", "normalize_rows", "parse_table", "polytope_volume", "prune_vertices", "read_matrix",
    "select_k", "select_max_volume", "solve_intensities", "summarize", "write_matrix", "xray_select",
]
