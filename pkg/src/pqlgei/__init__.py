"""Sparse penalized quasi-likelihood mixed models for hierarchical gene-by-exposure selection."""

__version__ = "0.1.0"

from .crossval import CVResult, auc, deviance, kfold_cv, predict
from .data_model import Coefficients, Dataset, get_family, standardize_genotypes
from .kinship import KinshipPair, KinshipPanel, build_kd, compute_grm, eigendecompose
from .simulate import BenchmarkConfig, SimSpec, run_benchmark, selection_metrics, simulate_dataset
from .solver import Design, PenaltySpec, SolverOptions, fit_path, fit_single
from .varcomp import NullModel, fit_null_aireml

__all__ = [
    "CVResult", "Coefficients", "Dataset", "Design", "KinshipPair", "KinshipPanel", "NullModel",
    "PenaltySpec", "SimSpec", "BenchmarkConfig", "SolverOptions", "auc", "build_kd", "compute_grm",
    "deviance", "eigendecompose", "fit_null_aireml", "fit_path", "fit_single", "get_family",
    "kfold_cv", "predict", "run_benchmark", "selection_metrics", "simulate_dataset",
    "standardize_genotypes",
]
