"""The three estimators: vanilla aggregation, post-selection, and the
adaptive blend of both, all sharing one cross-fitting core.

Cross-fitting splits the training rows in half, fits the forest on the first
half, and fits the tree-weighting regression on the second half's per-tree
predictions, so the second stage never scores rows a tree has seen. The
adaptive estimator solves, for each blend weight theta on a grid,

    target ~ intercept + theta * (tree predictions),  offset (1-theta) * rowmean

picks theta by cross-validated error (the pure row-mean offset is scored on
the same folds at theta=0), and refits the winner on the full second half.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import Dataset, ResponseTransform, RngStream, derive_stream, standardize_response
from .forest import (
    Forest,
    TreeParams,
    fit_forest,
    forest_from_json,
    forest_mean_predict_rows,
    forest_to_json,
    oob_predictions,
    prediction_matrix,
    split_counts,
)
from .lasso import CvResult, LassoProblem, assign_folds, coordinate_descent, cv_select_lambda

__all__ = [
    "DegenerateImportanceError",
    "FitConfig",
    "ImportanceVector",
    "LassoedModel",
    "fit_both",
    "fit_lassoed",
    "fit_post_selection",
    "model_from_json",
    "model_to_json",
    "predict_lassoed",
    "predict_lassoed_rows",
    "split_halves",
    "vanilla_importance",
    "variable_importance",
]

MODEL_FORMAT_VERSION = 1

# Stream children used by the fitting pipeline; fixed so that re-running any
# estimator with the same seed reproduces the same forest, split, and folds.
_CHILD_SPLIT = 0
_CHILD_FOREST = 1
_CHILD_CV = 2


class DegenerateImportanceError(ValueError):
    """Raised when split counts cannot be normalized into importances."""


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by all estimators; ``seed`` drives every random step."""

    n_trees: int = 200
    tree_params: TreeParams = field(default_factory=TreeParams)
    theta_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    cv_folds: int = 5
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-4
    lambda_rule: str = "min"
    penalize_intercept: bool = True
    standardize_response: bool = True
    cross_fit: bool = True
    split_fraction: float = 0.5
    theta0_error: str = "cv"  # or "oob": classic out-of-bag error on the forest half
    seed: int = 0
    n_workers: int = 1

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.theta_grid)
        if len(grid) == 0:
            raise ValueError("theta_grid must be nonempty")
        if any(not 0.0 <= t <= 1.0 for t in grid):
            raise ValueError("theta_grid values must lie in [0, 1]")
        if sorted(set(grid)) != list(grid):
            raise ValueError("theta_grid must be sorted and unique")
        object.__setattr__(self, "theta_grid", grid)
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.lambda_rule not in ("min", "1se"):
            raise ValueError("lambda_rule must be 'min' or '1se'")
        if self.theta0_error not in ("cv", "oob"):
            raise ValueError("theta0_error must be 'cv' or 'oob'")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")


@dataclass(frozen=True)
class LassoedModel:
    """A fitted blend: forest, chosen theta, tree weights, and the response map.

    Prediction at x (before inverting the transform) is
    ``theta_hat * (gamma0_hat + sum_j T_j(x) gamma_hat[j]) + (1 - theta_hat) * mean_j T_j(x)``.
    """

    forest: Forest
    theta_hat: float
    gamma0_hat: float
    gamma_hat: np.ndarray
    lambda_hat: float
    transform: ResponseTransform
    cv_curve: dict[float, float]
    split_d1: np.ndarray
    split_d2: np.ndarray

    def __post_init__(self) -> None:
        if self.gamma_hat.shape[0] != self.forest.n_trees:
            raise ValueError("gamma_hat length must equal the number of trees")


def split_halves(n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint halves of {0..n-1}, the first of size ceil(n/2)."""
    if n < 4:
        raise ValueError(f"need at least 4 rows to cross-fit, got {n}")
    perm = rng.generator().permutation(n)
    n1 = (n + 1) // 2
    return np.sort(perm[:n1]), np.sort(perm[n1:])


def _split_sizes(n: int, fraction: float) -> int:
    n1 = int(np.ceil(n * fraction))
    return min(max(n1, 2), n - 2)


@dataclass(frozen=True)
class _SecondStage:
    """Everything the tree-weighting stage needs, on the transformed scale."""

    forest: Forest
    tree_matrix: np.ndarray  # rows of the selection half x J
    offset_mean: np.ndarray  # per-row aggregate tree prediction used as offset
    target: np.ndarray
    folds: np.ndarray
    transform: ResponseTransform
    d1: np.ndarray
    d2: np.ndarray


def _prepare_stage(data: Dataset, config: FitConfig) -> _SecondStage:
    rng = derive_stream(config.seed, 0)
    if config.standardize_response:
        work, transform = standardize_response(data)
    else:
        work, transform = data, ResponseTransform.identity()

    if config.cross_fit:
        if config.split_fraction == 0.5:
            d1, d2 = split_halves(work.n_rows, rng.child(_CHILD_SPLIT))
        else:
            n1 = _split_sizes(work.n_rows, config.split_fraction)
            perm = rng.child(_CHILD_SPLIT).generator().permutation(work.n_rows)
            d1, d2 = np.sort(perm[:n1]), np.sort(perm[n1:])
        forest = fit_forest(
            work.subset(d1), config.n_trees, config.tree_params,
            rng.child(_CHILD_FOREST), n_workers=config.n_workers,
        )
        matrix = prediction_matrix(forest, work.subset(d2), in_sample=False)
        offset = matrix.values.mean(axis=1)
        target = work.response[d2]
    else:
        # No cross-fitting: forest and selection share all rows and the offset
        # is the out-of-bag mean, falling back to the full row mean when a row
        # is in every bag.
        d1 = np.arange(work.n_rows)
        d2 = np.arange(work.n_rows)
        forest = fit_forest(
            work, config.n_trees, config.tree_params,
            rng.child(_CHILD_FOREST), n_workers=config.n_workers,
        )
        matrix = prediction_matrix(forest, work, in_sample=True)
        counts = matrix.oob_mask.sum(axis=1)
        sums = np.where(matrix.oob_mask, matrix.values, 0.0).sum(axis=1)
        offset = np.where(counts > 0, sums / np.maximum(counts, 1), matrix.values.mean(axis=1))
        target = work.response

    folds = assign_folds(target.shape[0], config.cv_folds, rng.child(_CHILD_CV))
    return _SecondStage(
        forest=forest,
        tree_matrix=matrix.values,
        offset_mean=offset,
        target=target,
        folds=folds,
        transform=transform,
        d1=d1,
        d2=d2,
    )


def _theta_problem(stage: _SecondStage, theta: float, config: FitConfig) -> LassoProblem:
    design = np.column_stack([np.ones(stage.target.shape[0]), theta * stage.tree_matrix])
    return LassoProblem(
        design=design,
        target=stage.target,
        offset=(1.0 - theta) * stage.offset_mean,
        penalize_intercept=config.penalize_intercept,
    )


def _solve_theta(stage: _SecondStage, theta: float, config: FitConfig):
    """CV error and full-second-half refit at the chosen lambda for one theta."""
    problem = _theta_problem(stage, theta, config)
    cv = cv_select_lambda(
        problem,
        k=config.cv_folds,
        n_lambda=config.n_lambda,
        ratio=config.lambda_min_ratio,
        rule=config.lambda_rule,
        fold_assignment=stage.folds,
    )
    err = float(cv.cv_errors[cv.chosen_index])
    solution = coordinate_descent(problem, cv.chosen_lambda)
    return err, cv, solution


def _theta0_error(stage: _SecondStage, config: FitConfig, data: Dataset) -> float:
    if config.theta0_error == "oob" or not config.cross_fit:
        work = data
        if config.standardize_response:
            work, _ = standardize_response(data)
        oob, _ = oob_predictions(stage.forest, work.subset(stage.d1))
        y1 = work.response[stage.d1]
        keep = ~np.isnan(oob)
        return float(np.mean((y1[keep] - oob[keep]) ** 2))
    # Score the pure offset on the same folds the other theta values use.
    errs = [
        float(np.mean((stage.target[stage.folds == f] - stage.offset_mean[stage.folds == f]) ** 2))
        for f in range(int(stage.folds.max()) + 1)
    ]
    return float(np.mean(errs))


def _finalize(stage: _SecondStage, theta: float, cv: Optional[CvResult],
              solution, curve: dict[float, float]) -> LassoedModel:
    J = stage.forest.n_trees
    if theta == 0.0 or solution is None:
        gamma0, gamma, lam = 0.0, np.zeros(J), 0.0
    else:
        # The solver fits columns theta * T, so its slopes are already the
        # per-tree weights; its intercept absorbs one factor of theta.
        gamma0 = solution.gamma0 / theta
        gamma = solution.gamma
        lam = solution.lam
    return LassoedModel(
        forest=stage.forest,
        theta_hat=float(theta),
        gamma0_hat=float(gamma0),
        gamma_hat=gamma,
        lambda_hat=float(lam),
        transform=stage.transform,
        cv_curve=curve,
        split_d1=stage.d1,
        split_d2=stage.d2,
    )


def fit_post_selection(data: Dataset, config: FitConfig) -> LassoedModel:
    """Fit the cross-fitted, lasso-reweighted forest (all weight on the trees)."""
    stage = _prepare_stage(data, config)
    err, cv, solution = _solve_theta(stage, 1.0, config)
    return _finalize(stage, 1.0, cv, solution, {1.0: err})


def fit_lassoed(data: Dataset, config: FitConfig) -> LassoedModel:
    """Fit the adaptive estimator: pick theta by estimated error, then refit.

    Fold assignments are shared across the theta grid so the argmin compares
    like with like; ties prefer the smaller theta.
    """
    stage = _prepare_stage(data, config)
    return _lassoed_from_stage(stage, data, config)


def _lassoed_from_stage(stage: _SecondStage, data: Dataset, config: FitConfig) -> LassoedModel:
    curve: dict[float, float] = {}
    solutions: dict[float, object] = {}
    for theta in config.theta_grid:
        if theta == 0.0:
            curve[0.0] = _theta0_error(stage, config, data)
            solutions[0.0] = None
        else:
            err, cv, solution = _solve_theta(stage, theta, config)
            curve[theta] = err
            solutions[theta] = solution
    theta_hat = min(curve, key=lambda t: (curve[t], t))
    return _finalize(stage, theta_hat, None, solutions[theta_hat], curve)


def fit_both(data: Dataset, config: FitConfig) -> tuple[LassoedModel, LassoedModel]:
    """Fit the post-selection and adaptive estimators off one shared stage.

    Requires 1.0 in the theta grid; the returned models are identical to what
    the two public fitters produce separately under the same seed, the forest
    is just not grown twice.
    """
    if 1.0 not in config.theta_grid:
        return fit_post_selection(data, config), fit_lassoed(data, config)
    stage = _prepare_stage(data, config)
    lassoed = _lassoed_from_stage(stage, data, config)
    err, cv, solution = _solve_theta(stage, 1.0, config)
    post = _finalize(stage, 1.0, cv, solution, {1.0: err})
    return post, lassoed


def _tree_matrix_at(model: LassoedModel, X: np.ndarray) -> np.ndarray:
    from .forest import predict_rows

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.forest.n_features:
        raise ValueError(
            f"expected {model.forest.n_features} features, got {X.shape[1]}"
        )
    T = np.empty((X.shape[0], model.forest.n_trees))
    for j, t in enumerate(model.forest.trees):
        T[:, j] = predict_rows(t, X)
    return T


def predict_lassoed_rows(model: LassoedModel, X: np.ndarray) -> np.ndarray:
    """Blend the re-weighted and mean-aggregated tree predictions, then map
    back to the original response scale."""
    T = _tree_matrix_at(model, X)
    reg = model.gamma0_hat + T @ model.gamma_hat
    mean = T.mean(axis=1)
    blended = model.theta_hat * reg + (1.0 - model.theta_hat) * mean
    return model.transform.invert(blended)


def predict_lassoed(model: LassoedModel, x: np.ndarray) -> float:
    return float(predict_lassoed_rows(model, np.atleast_2d(x))[0])


@dataclass(frozen=True)
class ImportanceVector:
    kappa: np.ndarray
    theta_used: float


def vanilla_importance(forest: Forest) -> ImportanceVector:
    """Split counts normalized over all trees (the theta=0 importance)."""
    counts = split_counts(forest).sum(axis=1).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise DegenerateImportanceError("forest has no internal splits")
    return ImportanceVector(kappa=counts / total, theta_used=0.0)


def variable_importance(model: LassoedModel, absolute: bool = False) -> ImportanceVector:
    """Blend weight-weighted and raw split-count shares per feature.

    The weighted share uses the fitted tree weights as-is; ``absolute=True``
    switches to |weights| for the cases where signed weights cancel.
    """
    counts = split_counts(model.forest).astype(np.float64)
    raw = counts.sum(axis=1)
    raw_total = raw.sum()
    if raw_total == 0:
        raise DegenerateImportanceError("forest has no internal splits")
    theta = model.theta_hat
    kappa = (1.0 - theta) * raw / raw_total
    if theta > 0.0:
        weights = np.abs(model.gamma_hat) if absolute else model.gamma_hat
        weighted = counts @ weights
        denom = weighted.sum()
        if denom == 0.0:
            raise DegenerateImportanceError(
                "weighted split counts sum to zero; retry with absolute=True"
            )
        kappa = kappa + theta * weighted / denom
    if np.any(kappa < 0):
        warnings.warn("importance has negative entries (signed tree weights)", RuntimeWarning)
    return ImportanceVector(kappa=kappa, theta_used=theta)


def model_to_json(model: LassoedModel) -> str:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "theta_hat": model.theta_hat,
        "gamma0_hat": model.gamma0_hat,
        "gamma_hat": model.gamma_hat.tolist(),
        "lambda_hat": model.lambda_hat,
        "transform": {"center": model.transform.center, "scale": model.transform.scale},
        "cv_curve": {repr(k): v for k, v in sorted(model.cv_curve.items())},
        "split_d1": model.split_d1.tolist(),
        "split_d2": model.split_d2.tolist(),
        "forest": json.loads(forest_to_json(model.forest)),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str) -> LassoedModel:
    doc = json.loads(text)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    forest = forest_from_json(json.dumps(doc["forest"]))
    return LassoedModel(
        forest=forest,
        theta_hat=float(doc["theta_hat"]),
        gamma0_hat=float(doc["gamma0_hat"]),
        gamma_hat=np.asarray(doc["gamma_hat"], dtype=np.float64),
        lambda_hat=float(doc["lambda_hat"]),
        transform=ResponseTransform(**doc["transform"]),
        cv_curve={float(k): float(v) for k, v in doc["cv_curve"].items()},
        split_d1=np.asarray(doc["split_d1"], dtype=np.int64),
        split_d2=np.asarray(doc["split_d2"], dtype=np.int64),
    )
