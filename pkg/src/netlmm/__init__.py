"""Linear mixed-effects modeling for populations of weighted networks.

The model treats each subject's network as a vector of edge weights
ordered by community cells (unordered pairs of communities).  Subject
covariates act on edge means through cell-level effects plus sum-to-zero
per-edge deviations; a cell-level random effect with free covariance
captures correlated individual differences, and a structured residual
covariance absorbs the rest.
"""

from .errors import ConvergenceError, NetlmmError, NumericalError, ValidationError
from .netdata import (
    CellPartition,
    DesignMatrices,
    NetworkPopulation,
    SubjectNetwork,
    build_designs,
    build_partition,
    fisher_z,
)
from .covstruct import (
    RandomEffectCov,
    ResidualCov,
    StructuredCovariance,
    project_residual_cov,
)
from .estim import (
    CoefficientSet,
    EmOptions,
    FitResult,
    GlsFit,
    fit_em,
    fit_gls,
    fit_ols,
    marginal_loglik,
    ols_fit,
)
from .infer import (
    CORRECTIONS,
    InferenceReport,
    adjust,
    cell_tests,
    confidence_intervals,
    edge_tests,
    rejection_sweep,
)
from .refine import (
    EdgeEffectField,
    RefinementResult,
    edge_effect_field,
    kmeans_objective,
    refine_kmeans,
    refine_likelihood,
    split_community,
)
from .simlab import (
    ESTIMATORS,
    GenerativeSpec,
    NullStudyReport,
    StudyReport,
    benchmark_spec,
    estimator_study,
    fixture_null_spec,
    fixture_spec,
    generate,
    null_split_study,
    spec_from_fit,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "NetlmmError",
    "ValidationError",
    "NumericalError",
    "ConvergenceError",
    "CellPartition",
    "SubjectNetwork",
    "NetworkPopulation",
    "DesignMatrices",
    "build_partition",
    "build_designs",
    "fisher_z",
    "ResidualCov",
    "RandomEffectCov",
    "StructuredCovariance",
    "project_residual_cov",
    "CoefficientSet",
    "GlsFit",
    "FitResult",
    "EmOptions",
    "fit_ols",
    "ols_fit",
    "fit_gls",
    "fit_em",
    "marginal_loglik",
    "CORRECTIONS",
    "InferenceReport",
    "adjust",
    "cell_tests",
    "edge_tests",
    "confidence_intervals",
    "rejection_sweep",
    "EdgeEffectField",
    "RefinementResult",
    "edge_effect_field",
    "kmeans_objective",
    "refine_kmeans",
    "refine_likelihood",
    "split_community",
    "ESTIMATORS",
    "GenerativeSpec",
    "StudyReport",
    "NullStudyReport",
    "generate",
    "spec_from_fit",
    "estimator_study",
    "null_split_study",
    "fixture_spec",
    "fixture_null_spec",
    "benchmark_spec",
]
