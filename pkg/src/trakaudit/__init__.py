"""Exact leave-one-out influence and its TRAK-style approximations."""

from .datagen import DesignConfig, generate, make_true_beta, sample_responses, toeplitz_design
from .errors import (
    BreakdownError,
    DimensionError,
    EmptyDatasetError,
    FormatError,
    RefitError,
    ResponseError,
    SolverError,
    TrakAuditError,
    UnderdeterminedError,
)
from .experiment import ExperimentConfig, ExperimentReport, evaluate, run_experiment
from .influence import (
    Estimator,
    Projection,
    influence_alo,
    influence_linear,
    influence_trak,
    influence_true,
    make_projection,
)
from .ingest import ImageRecord, binary_subset, pool_and_standardize, read_cifar_binary
from .metrics import RankAlignment, ScalingFit, pearson, rank_alignment, scaling_fit
from .models import Dataset, Kind, ModelSpec, gradient_matrix, loss_derivatives, model_gradient, predict
from .solver import FitResult, LinearizedProblem, SolverOptions, build_linearized, fit_erm, fit_linearized
from .tables import InfluenceTable, read_dataset, read_influence_csv, write_dataset

__version__ = "0.1.0"
