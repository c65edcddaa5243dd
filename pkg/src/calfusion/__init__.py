"""Calibrated multiply robust regression under data fusion.

A regression of ``Y`` on ``(W, V)`` is estimated from two samples that never
observe ``Y`` and ``W`` together: a primary sample with ``(Y, V)`` and an
auxiliary sample with ``(W, V)``.  Empirical-likelihood calibration weights
combine several propensity and imputation working models, and the estimate
stays consistent when any one of them is correct.
"""

from . import kernels
from .calibration import (
    CalibrationResult,
    ConstraintSet,
    build_constraints,
    calibrate,
    compute_weights,
    solve_multiplier,
)
from .data import FusedDataset, ReplicateSet, default_schema, read_fused_csv, write_fused_csv
from .errors import *  # noqa: F401,F403
from .estimators import (
    LINKS,
    EstimateReport,
    OutcomeLink,
    TFunction,
    default_t,
    get_link,
    param_labels,
    solve_dr,
    solve_mr,
    solve_theta_k,
)
from .inference import (
    VariancePlugIn,
    bootstrap_variance,
    estimate_variance_dr,
    estimate_variance_mr,
    rubin_combine,
)
from .models import (
    ImputationFit,
    ModelSpec,
    PropensityFit,
    Term,
    build_design_matrix,
    draw_imputations,
    fit_imputation,
    fit_propensity,
    predict_propensity,
)
from .pipeline import FittedModelBank, ModelBank, estimate_dr, estimate_mr, fit_bank, run_estimator, stream
from .simulation import SimConfig, SimSummary, efficiency_bound_oracle, generate_dataset, run_monte_carlo

__version__ = "0.1.0"
