"""Mixture-of-experts lab: temperature-softmax gating, EM fitting, Voronoi losses."""

from .analysis import (
    IndependenceReport,
    PolySearchResult,
    SlopeFit,
    UnsupportedCellSize,
    independence_check,
    loglog_fit,
    poly_residuals,
    rbar_known,
    search_nontrivial,
)
from .em import DegenerateFit, FitConfig, FitResult, NearTruth, RandomInit, em_fit
from .harness import ExperimentConfig, ExperimentResult, desk_profile, run_experiment
from .metrics import (
    LossKind,
    LossReport,
    MCEstimate,
    eval_loss,
    hellinger_distance,
    tv_distance,
    voronoi_assign,
)
from .model import (
    Activation,
    Atom,
    GateSpec,
    MixingMeasure,
    conditional_density,
    gate_weights,
    log_likelihood,
    measure_from_json,
    measure_to_json,
    pde1_residual,
    pde2_residual,
    scale_measure,
)
from .sampling import Dataset, SampleConfig, sample_dataset, substream

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "Atom",
    "Dataset",
    "ExperimentConfig",
    "ExperimentResult",
    "DegenerateFit",
    "FitConfig",
    "FitResult",
    "GateSpec",
    "IndependenceReport",
    "LossKind",
    "LossReport",
    "MCEstimate",
    "MixingMeasure",
    "NearTruth",
    "PolySearchResult",
    "RandomInit",
    "SampleConfig",
    "SlopeFit",
    "UnsupportedCellSize",
    "conditional_density",
    "desk_profile",
    "em_fit",
    "eval_loss",
    "gate_weights",
    "hellinger_distance",
    "independence_check",
    "log_likelihood",
    "loglog_fit",
    "measure_from_json",
    "measure_to_json",
    "pde1_residual",
    "pde2_residual",
    "poly_residuals",
    "rbar_known",
    "run_experiment",
    "sample_dataset",
    "scale_measure",
    "search_nontrivial",
    "substream",
    "tv_distance",
    "voronoi_assign",
]
