"""Joint latent-variable regression of two feature blocks on an outcome.

Two high-dimensional feature matrices are decomposed into joint and
block-specific low-rank parts, and the outcome (continuous or binary) is
regressed on the joint scores and their heterogeneity.  Estimation is by
EM: closed-form updates under a Gaussian outcome, Gauss-Hermite quadrature
under a Bernoulli one.  Chi-square association tests use the observed
information assembled from complete-data pieces, and a simulation harness
reproduces the package's synthetic benchmark study.
"""

from .errors import (
    DataFormatError,
    DimensionMismatchError,
    EstimationError,
    GlmPo2plsError,
    GridBudgetError,
    NumericalDomainError,
)
from .model import (
    BERNOULLI,
    FAMILIES,
    GAUSSIAN,
    ConstraintViolation,
    DataSet,
    LatentMoments,
    ModelDims,
    Theta,
    build_joint_covariance,
    canonicalize,
    conditional_latent_moments,
    conditional_moments_given_xy,
    log_likelihood_gaussian,
    predict_linear_predictor,
    validate_constraints,
)
from .quadrature import (
    HermiteRule,
    QuadratureGrid,
    build_grid,
    gauss_hermite_rule,
    latent_joint_covariance,
)
from .em_gaussian import FitConfig, FitResult, fit_gaussian, init_params
from .em_binary import (
    DEFAULT_QUAD_NODES,
    conditional_prob_z,
    e_step_binary,
    fit_binary,
    log_likelihood_binary,
)
from .inference import (
    TestResult,
    chi_square_survival,
    fit_from_theta,
    louis_information_alpha,
    test_componentwise,
    test_full,
)
from .ridge import RidgeFit, ridge_fit_cv
from .simbench import (
    SimSetting,
    SimulatedData,
    StudyReport,
    align_components_to_truth,
    generate_dataset,
    loading_inner_product,
    predict_outcome,
    rmsep,
    run_replication,
    run_study,
    scaled_error,
    table_one_settings,
    tpr_top_quarter,
)
from .io import (
    IngestResult,
    LoadedModel,
    ingest,
    load_model,
    read_matrix_csv,
    read_outcome_csv,
    save_model,
    scree_table,
)

__version__ = "0.1.0"

__all__ = [
    "BERNOULLI",
    "ConstraintViolation",
    "DEFAULT_QUAD_NODES",
    "DataFormatError",
    "DataSet",
    "DimensionMismatchError",
    "EstimationError",
    "FAMILIES",
    "FitConfig",
    "FitResult",
    "GAUSSIAN",
    "GlmPo2plsError",
    "GridBudgetError",
    "HermiteRule",
    "IngestResult",
    "LatentMoments",
    "LoadedModel",
    "ModelDims",
    "NumericalDomainError",
    "QuadratureGrid",
    "RidgeFit",
    "SimSetting",
    "SimulatedData",
    "StudyReport",
    "TestResult",
    "Theta",
    "align_components_to_truth",
    "build_grid",
    "build_joint_covariance",
    "canonicalize",
    "chi_square_survival",
    "conditional_latent_moments",
    "conditional_moments_given_xy",
    "conditional_prob_z",
    "e_step_binary",
    "fit_binary",
    "fit_from_theta",
    "fit_gaussian",
    "gauss_hermite_rule",
    "generate_dataset",
    "ingest",
    "init_params",
    "latent_joint_covariance",
    "load_model",
    "loading_inner_product",
    "log_likelihood_binary",
    "log_likelihood_gaussian",
    "louis_information_alpha",
    "predict_linear_predictor",
    "predict_outcome",
    "read_matrix_csv",
    "read_outcome_csv",
    "ridge_fit_cv",
    "rmsep",
    "run_replication",
    "run_study",
    "save_model",
    "scaled_error",
    "scree_table",
    "table_one_settings",
    "test_componentwise",
    "test_full",
    "tpr_top_quarter",
    "validate_constraints",
]
