"""Coordinate-descent solver for l1-penalized least squares with an offset.

The solved objective is::

    (1/N) * ||target - offset - X @ gamma||^2  +  lambda * sum_{j in P} s_j * |gamma_j|

where column 0 of ``X`` is all ones, ``P`` is the penalized column set (the
intercept is penalized by default, matching the objective the estimators are
defined with), and ``s_j`` is the sample sd of column j (s_0 = 1). The sd
weights are what "internally standardized columns with a single lambda" means
on the original scale; tree-prediction columns otherwise share scale poorly.
Zero-variance columns get coefficient 0 and are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import RngStream

try:  # the JIT kernel is a big win on long lambda paths; plain Python works too
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(f):
            return f

        return deco


__all__ = [
    "CvResult",
    "LassoProblem",
    "LassoSolution",
    "coordinate_descent",
    "cv_select_lambda",
    "kkt_residual",
    "lambda_max",
    "lambda_path",
    "solve_path",
]

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 100_000
_ZERO_VAR = 1e-12


@dataclass(frozen=True)
class LassoProblem:
    """Design with a leading all-ones column, a target, and a fixed offset.

    ``offset`` is subtracted from the target with coefficient pinned at one;
    callers encode any blend weight by pre-scaling the design columns and the
    offset before building the problem.
    """

    design: np.ndarray
    target: np.ndarray
    offset: np.ndarray
    penalize_intercept: bool = True

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.design, dtype=np.float64)
        y = np.asarray(self.target, dtype=np.float64).ravel()
        off = np.asarray(self.offset, dtype=np.float64).ravel()
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "target", y)
        object.__setattr__(self, "offset", off)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError("design must be a 2-D matrix with >= 1 column")
        n = X.shape[0]
        if y.shape[0] != n or off.shape[0] != n:
            raise ValueError("design, target, and offset row counts must agree")
        if not (np.isfinite(X).all() and np.isfinite(y).all() and np.isfinite(off).all()):
            raise ValueError("design, target, and offset must be finite")
        if not np.all(X[:, 0] == 1.0):
            raise ValueError("design column 0 must be exactly ones")

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    def rows(self, idx: np.ndarray) -> "LassoProblem":
        return LassoProblem(
            design=self.design[idx],
            target=self.target[idx],
            offset=self.offset[idx],
            penalize_intercept=self.penalize_intercept,
        )


@dataclass(frozen=True)
class LassoSolution:
    gamma0: float
    gamma: np.ndarray
    lam: float
    objective: float
    n_nonzero: int
    converged: bool
    iterations: int
    objective_history: Optional[tuple[float, ...]] = None

    def coefficients(self) -> np.ndarray:
        """Full coefficient vector (intercept first)."""
        return np.concatenate([[self.gamma0], self.gamma])

    def predict(self, design: np.ndarray, offset: np.ndarray | float = 0.0) -> np.ndarray:
        return offset + design @ self.coefficients()


def _column_scales(X: np.ndarray) -> np.ndarray:
    """Sample sd per column; the intercept keeps weight 1, dead columns 0."""
    s = np.std(X, axis=0, ddof=0)
    s[0] = 1.0
    s[s <= _ZERO_VAR] = 0.0
    return s


def _penalty_weights(problem: LassoProblem, scales: np.ndarray) -> np.ndarray:
    w = scales.copy()
    if not problem.penalize_intercept:
        w[0] = 0.0
    return w


def objective_value(problem: LassoProblem, gamma_full: np.ndarray, lam: float) -> float:
    """Objective as documented in the module docstring (sd-weighted penalty)."""
    r = problem.target - problem.offset - problem.design @ gamma_full
    w = _penalty_weights(problem, _column_scales(problem.design))
    return float(np.mean(r * r) + lam * np.sum(w * np.abs(gamma_full)))


def lambda_max(problem: LassoProblem) -> float:
    """Smallest lambda at which the all-zero penalized solution is optimal.

    The zero-solution KKT bound is ``max_j |(2/N) x_j . r0| / s_j`` over
    penalized columns, with r0 the offset-adjusted target residualized on any
    unpenalized columns (here: the intercept, when unpenalized).
    """
    prep = _Prepared(problem)
    take = (prep.scales > 0.0) & prep.penal
    if not take.any():
        return 0.0
    if problem.penalize_intercept:
        grads = prep.c
    else:
        grads = 2.0 / prep.n * (prep.Xs.T @ (prep.y0 - np.mean(prep.y0)))
    lmax = float(np.max(np.abs(grads[take])))
    # One-ulp nudge: solving at exactly lambda_max must keep every penalized
    # coefficient at zero despite last-digit rounding.
    return float(np.nextafter(lmax, np.inf)) if lmax > 0.0 else 0.0


@njit(cache=True)
def _sweep_kernel(GT, c, d, g, q, penal, lam, indices):  # pragma: no cover - jitted
    max_delta = 0.0
    for t in range(indices.shape[0]):
        j = indices[t]
        gj = g[j]
        rho = c[j] - q[j] + d[j] * gj
        if penal[j]:
            a = abs(rho) - lam
            if a > 0.0:
                new = a / d[j] if rho > 0.0 else -a / d[j]
            else:
                new = 0.0
        else:
            new = rho / d[j]
        delta = new - gj
        if delta != 0.0:
            row = GT[j]
            for m in range(q.shape[0]):
                q[m] += delta * row[m]
            g[j] = new
            ad = abs(delta)
            if ad > max_delta:
                max_delta = ad
    return max_delta


class _Prepared:
    """Sd-scaled Gram view of a problem, shared across a lambda path.

    Coordinate updates run on the Gram system (covariance updates), so a
    coordinate that stays at zero costs O(1) per sweep and a changing one
    costs O(k).
    """

    def __init__(self, problem: LassoProblem):
        X = problem.design
        n, k = X.shape
        self.n, self.k = n, k
        self.scales = _column_scales(X)
        live = self.scales > 0.0
        self.inv = np.where(live, 1.0 / np.where(live, self.scales, 1.0), 0.0)
        Xs = X * self.inv[None, :]
        self.Xs = Xs
        self.y0 = problem.target - problem.offset
        self.c = 2.0 / n * (Xs.T @ self.y0)
        G = 2.0 / n * (Xs.T @ Xs)
        self.GT = np.ascontiguousarray(G.T)  # row j = column j of the Gram
        self.d = np.ascontiguousarray(np.diag(G))
        self.y0_norm = float(np.mean(self.y0 * self.y0))
        self.penal = np.ones(k, dtype=bool)
        if not problem.penalize_intercept:
            self.penal[0] = False
        self.cols = np.flatnonzero(live).astype(np.int64)

    def fit_objective(self, g: np.ndarray, q: np.ndarray) -> float:
        # (1/N)||y0 - Xs g||^2 in Gram terms.
        return self.y0_norm - float(self.c @ g) + 0.5 * float(g @ q)


def _cd_core(prep: _Prepared, lam: float, g: np.ndarray, tol: float, max_iter: int,
             keep_history: bool):
    GT, c, d, penal = prep.GT, prep.c, prep.d, prep.penal
    q = GT @ g  # Gram is symmetric: G @ g
    history: list[float] = []

    def log_state() -> None:
        if keep_history:
            history.append(prep.fit_objective(g, q) + lam * float(np.sum(np.abs(g[penal]))))

    cols = prep.cols
    iters = 0
    converged = False
    while iters < max_iter:
        max_delta = _sweep_kernel(GT, c, d, g, q, penal, lam, cols)
        iters += 1
        log_state()
        if max_delta < tol:
            converged = True
            break
        active = cols[(g[cols] != 0.0) | ~penal[cols]]
        if active.shape[0] < cols.shape[0]:
            while iters < max_iter:
                max_delta = _sweep_kernel(GT, c, d, g, q, penal, lam, active)
                iters += 1
                log_state()
                if max_delta < tol:
                    break
    return iters, converged, history


def _package(problem: LassoProblem, prep: _Prepared, g: np.ndarray, lam: float,
             iters: int, converged: bool, history: list[float],
             keep_history: bool) -> LassoSolution:
    gamma_scaled = g * prep.inv  # back to original column scale
    gamma0 = float(gamma_scaled[0])
    gamma = gamma_scaled[1:]
    full = np.concatenate([[gamma0], gamma])
    n_nonzero = int(np.count_nonzero(gamma)) + int(problem.penalize_intercept and gamma0 != 0.0)
    return LassoSolution(
        gamma0=gamma0,
        gamma=gamma,
        lam=float(lam),
        objective=objective_value(problem, full, lam),
        n_nonzero=n_nonzero,
        converged=converged,
        iterations=iters,
        objective_history=tuple(history) if keep_history else None,
    )


def coordinate_descent(
    problem: LassoProblem,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: Optional[np.ndarray] = None,
    keep_history: bool = False,
) -> LassoSolution:
    """Cyclic soft-threshold descent until the max coefficient change < tol.

    Works on sd-scaled columns internally and reports coefficients on the
    original column scale. Non-convergence returns the best iterate with
    ``converged=False``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    prep = _Prepared(problem)
    g = np.zeros(prep.k)
    if warm_start is not None:
        g = np.asarray(warm_start, dtype=np.float64) * prep.scales  # to scaled coords
    iters, converged, history = _cd_core(prep, float(lam), g, tol, max_iter, keep_history)
    return _package(problem, prep, g, float(lam), iters, converged, history, keep_history)


def kkt_residual(problem: LassoProblem, solution: LassoSolution) -> float:
    """Max subgradient-optimality violation of a solution, in original scale.

    For penalized columns: ``|(2/N) x_j . r - lam * sign(gamma_j) * s_j|`` at
    nonzero coordinates and ``max(|(2/N) x_j . r| - lam * s_j, 0)`` at zeros;
    unpenalized columns must have zero gradient.
    """
    X = problem.design
    n = X.shape[0]
    full = solution.coefficients()
    r = problem.target - problem.offset - X @ full
    grads = 2.0 / n * (X.T @ r)
    scales = _column_scales(X)
    w = _penalty_weights(problem, scales)
    worst = 0.0
    for j in range(X.shape[1]):
        if scales[j] == 0.0 and j > 0:
            continue
        if w[j] == 0.0:
            worst = max(worst, abs(grads[j]))
        elif full[j] != 0.0:
            worst = max(worst, abs(grads[j] - solution.lam * np.sign(full[j]) * w[j]))
        else:
            worst = max(worst, abs(grads[j]) - solution.lam * w[j])
    return float(worst)


def lambda_path(problem: LassoProblem, n_lambda: int = 100, ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced path from lambda_max down to ratio * lambda_max."""
    if n_lambda < 2:
        raise ValueError("n_lambda must be >= 2")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    lmax = lambda_max(problem)
    if lmax == 0.0:
        return np.zeros(1)
    ratios = ratio ** np.linspace(0.0, 1.0, n_lambda)
    return lmax * ratios


def solve_path(
    problem: LassoProblem,
    lambdas: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> list[LassoSolution]:
    """Warm-started solves down a descending lambda path."""
    prep = _Prepared(problem)
    solutions: list[LassoSolution] = []
    g = np.zeros(prep.k)
    for lam in lambdas:
        iters, converged, history = _cd_core(prep, float(lam), g, tol, max_iter, False)
        solutions.append(_package(problem, prep, g, float(lam), iters, converged, history, False))
    return solutions


@dataclass(frozen=True)
class CvResult:
    lambdas: np.ndarray
    cv_errors: np.ndarray
    cv_se: np.ndarray
    chosen_lambda: float
    chosen_index: int
    fold_assignment: np.ndarray

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "cv_errors": self.cv_errors.tolist(),
            "cv_se": self.cv_se.tolist(),
            "chosen_lambda": self.chosen_lambda,
            "chosen_index": self.chosen_index,
            "fold_assignment": self.fold_assignment.tolist(),
        }


def assign_folds(n: int, k: int, rng: RngStream) -> np.ndarray:
    """Random partition into k near-equal folds (sizes differ by at most 1)."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = rng.generator().permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return assignment


def cv_select_lambda(
    problem: LassoProblem,
    k: int,
    rng: Optional[RngStream] = None,
    n_lambda: int = 100,
    ratio: float = 1e-4,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rule: str = "min",
    fold_assignment: Optional[np.ndarray] = None,
    lambdas: Optional[np.ndarray] = None,
) -> CvResult:
    """K-fold cross-validation over a shared lambda path.

    Held-out error applies the offset on the held-out rows as well. The
    default rule picks the error-minimizing lambda (ties -> larger lambda);
    ``rule="1se"`` picks the largest lambda within one standard error of it.
    Callers may pass a fixed ``fold_assignment`` instead of a stream.
    """
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown rule {rule!r}")
    n = problem.n_rows
    if fold_assignment is None:
        if rng is None:
            raise ValueError("provide either rng or fold_assignment")
        fold_assignment = assign_folds(n, k, rng)
    else:
        fold_assignment = np.asarray(fold_assignment, dtype=np.int64)
        if fold_assignment.shape[0] != n:
            raise ValueError("fold_assignment length must match rows")
        k = int(fold_assignment.max()) + 1
    counts = np.bincount(fold_assignment, minlength=k)
    if counts.min() < 1:
        raise ValueError("every fold needs at least one row")

    lams = lambda_path(problem, n_lambda, ratio) if lambdas is None else np.asarray(lambdas)
    fold_mse = np.empty((k, lams.shape[0]))
    for f in range(k):
        test = fold_assignment == f
        train_problem = problem.rows(~test)
        sols = solve_path(train_problem, lams, tol=tol, max_iter=max_iter)
        Xt = problem.design[test]
        yt = problem.target[test] - problem.offset[test]
        for i, sol in enumerate(sols):
            resid = yt - Xt @ sol.coefficients()
            fold_mse[f, i] = np.mean(resid * resid)

    cv_errors = fold_mse.mean(axis=0)
    cv_se = fold_mse.std(axis=0, ddof=1) / np.sqrt(k)
    best = int(np.argmin(cv_errors))  # first minimum = largest lambda on ties
    if rule == "1se":
        cutoff = cv_errors[best] + cv_se[best]
        best = int(np.flatnonzero(cv_errors <= cutoff)[0])
    return CvResult(
        lambdas=lams,
        cv_errors=cv_errors,
        cv_se=cv_se,
        chosen_lambda=float(lams[best]),
        chosen_index=best,
        fold_assignment=fold_assignment,
    )
