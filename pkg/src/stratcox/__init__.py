"""Batch mitigation for survival prediction models by stratified Cox
regression, with ComBat and normalization baselines and a scenario
simulation harness."""

from .combat import combat_adjust
from .concordance import Concordance, harrell_c, stratified_c
from .core import (
    BatchLayout,
    Dataset,
    ExpressionMatrix,
    FittedModel,
    SparseCoefficients,
    SurvivalRecord,
    risk_score,
    validate_dataset,
)
from .cox import build_stratum_index, fit_newton, partial_loglik, score_and_curvature
from .normalize import NormalizationReference, frozen_apply, median_normalize, quantile_normalize
from .penalized import fit_coordinate_descent, fit_penalized
from .univariate import prefilter, select_by_pvalue_grid

__version__ = "0.1.0"

__all__ = [
    "BatchLayout", "Concordance", "Dataset", "ExpressionMatrix", "FittedModel",
    "NormalizationReference", "SparseCoefficients", "SurvivalRecord",
    "build_stratum_index", "combat_adjust", "fit_coordinate_descent", "fit_newton",
    "fit_penalized", "frozen_apply", "harrell_c", "median_normalize", "partial_loglik",
    "prefilter", "quantile_normalize", "risk_score", "score_and_curvature",
    "select_by_pvalue_grid", "stratified_c", "validate_dataset",
]
