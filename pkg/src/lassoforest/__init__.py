"""Random forests with adaptive lasso re-weighting of the trees.

Submodules:
  core        data containers, RNG streams, response scaling, CSV I/O
  forest      CART regression trees, bagging, out-of-bag bookkeeping
  lasso       coordinate-descent l1 solver, lambda path, cross-validation
  ensemble    the vanilla / post-selection / adaptive estimators
  simgen      synthetic data generators with SNR calibration
  theory      closed-form error expressions and Monte Carlo oracles
  experiments sweep, decomposition, error-estimate, and importance pipelines
  cli         command-line entry point
"""

from .core import (
    Dataset,
    ResponseTransform,
    RngStream,
    SnrSpec,
    derive_stream,
    standardize_response,
)
from .ensemble import (
    FitConfig,
    LassoedModel,
    fit_lassoed,
    fit_post_selection,
    predict_lassoed,
    predict_lassoed_rows,
    variable_importance,
)
from .forest import Forest, TreeParams, fit_forest, forest_mean_predict

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FitConfig",
    "Forest",
    "LassoedModel",
    "ResponseTransform",
    "RngStream",
    "SnrSpec",
    "TreeParams",
    "derive_stream",
    "fit_forest",
    "fit_lassoed",
    "fit_post_selection",
    "forest_mean_predict",
    "predict_lassoed",
    "predict_lassoed_rows",
    "standardize_response",
    "variable_importance",
]
