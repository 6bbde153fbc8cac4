"""Closed-form prediction-error expressions for the three estimators under
the Gaussian base-learner model, with Monte Carlo oracles for each.

The closed forms describe bias^2 + variance of the predictor itself, i.e. the
expected squared deviation of a prediction from the response mean mu; the
Gaussian oracle therefore reports centered deviations E[(yhat - mu)^2]. The
minimum-norm oracle (more learners than rows) measures the ordinary
predictive error against a fresh noisy response, matching its limit formula.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import RngStream

__all__ = [
    "AppendixScalingResult",
    "GaussianOracleConfig",
    "OracleEstimate",
    "OracleResult",
    "TheoryParams",
    "gaussian_oracle_mc",
    "implied_theory_params",
    "learner_scaling_mc",
    "min_norm_mse_limit",
    "min_norm_oracle_mc",
    "mse_ada_formula",
    "mse_mean_formula",
    "mse_reg_formula",
    "optimal_theta",
    "remark3_threshold",
]


@dataclass(frozen=True)
class TheoryParams:
    """Inputs to the closed forms: learner bias eta, learner variance psi,
    learner covariance omega, ensemble size J, sample size N, noise sigma2,
    signal variance phi, and response mean mu."""

    eta: float
    psi: float
    omega: float
    J: int
    N: int
    sigma2: float
    phi: float
    mu: float = 0.0

    def __post_init__(self) -> None:
        if self.eta < 0 or self.psi < 0:
            raise ValueError("eta and psi must be nonnegative")
        if self.omega > self.psi + 1e-12:
            raise ValueError("omega cannot exceed psi (covariance vs variance)")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")

    @property
    def mean_variance_term(self) -> float:
        """A: squared bias plus the aggregated learner (co)variance."""
        J = self.J
        return self.eta**2 + self.psi / J + (J * (J - 1) / J**2) * self.omega

    @property
    def reg_variance_term(self) -> float:
        """B: the re-weighting estimation variance term."""
        if self.N <= self.J + 1:
            raise ValueError(
                f"N={self.N} must exceed J+1={self.J + 1}; for more learners than "
                "rows use min_norm_mse_limit"
            )
        return self.sigma2 / (self.N - self.J - 1)


def mse_mean_formula(params: TheoryParams) -> float:
    """Error of the mean-aggregated ensemble: eta^2 + psi/J + ((J-1)/J) omega + phi."""
    return params.mean_variance_term + params.phi


def mse_reg_formula(params: TheoryParams) -> float:
    """Error of the OLS-reweighted ensemble: sigma2/(N-J-1) + phi (needs N > J+1)."""
    return params.reg_variance_term + params.phi


def mse_ada_formula(params: TheoryParams, theta: float) -> float:
    """Error of the theta-blend; reduces to the two endpoints at theta 0 and 1."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    A = params.mean_variance_term
    B = params.reg_variance_term
    return (1.0 - theta) ** 2 * A + theta**2 * B + params.phi


def optimal_theta(params: TheoryParams) -> tuple[float, bool]:
    """Minimizer A/(A+B) of the blend quadratic; (0.5, True) when degenerate."""
    A = params.mean_variance_term
    B = params.reg_variance_term
    if A + B == 0.0:
        return 0.5, True
    return A / (A + B), False


def remark3_threshold(c: float) -> float:
    """Every theta in (0, 2c/(c+1)) strictly beats both endpoints when the
    endpoint error ratio A/B equals c <= 1."""
    if not 0.0 < c <= 1.0:
        raise ValueError("c must be in (0, 1]")
    return 2.0 * c / (c + 1.0)


def min_norm_mse_limit(r: float, sigma2: float) -> float:
    """Limit predictive error of the minimum-norm interpolator at aspect ratio
    r = J/N > 1: 1 - 1/r + sigma2 * r / (r - 1)."""
    if r <= 1.0:
        raise ValueError("aspect ratio r must exceed 1 (more learners than rows)")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    return 1.0 - 1.0 / r + sigma2 * r / (r - 1.0)


@dataclass(frozen=True)
class GaussianOracleConfig:
    """Gaussian learner-output model: training rows F_i ~ N(0, W), response
    y = Gamma_0 + F Gamma_1: + eps with the tree weights summing to one."""

    W: np.ndarray
    Gamma: np.ndarray
    N: int
    sigma: float
    trials: int
    test_points: int = 100

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        G = np.asarray(self.Gamma, dtype=np.float64).ravel()
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Gamma", G)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("W must be square")
        J = W.shape[0]
        if G.shape[0] != J + 1:
            raise ValueError("Gamma must have length J+1 (intercept first)")
        if not np.allclose(W, W.T, atol=1e-10):
            raise ValueError("W must be symmetric")
        if np.linalg.eigvalsh(W).min() < -1e-10:
            raise ValueError("W must be positive semidefinite")
        if abs(G[1:].sum() - 1.0) > 1e-9:
            raise ValueError("learner weights Gamma[1:] must sum to 1")
        if self.N <= J + 1:
            raise ValueError("need N > J+1 for the OLS re-weighting oracle")
        if self.trials < 100:
            raise ValueError("need at least 100 trials")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def J(self) -> int:
        return self.W.shape[0]

    @property
    def phi(self) -> float:
        """Signal variance implied by (W, Gamma)."""
        g = self.Gamma[1:]
        return float(g @ self.W @ g)

    @property
    def mu(self) -> float:
        return float(self.Gamma[0])


def implied_theory_params(cfg: GaussianOracleConfig) -> TheoryParams:
    """Map an oracle configuration onto the closed-form inputs.

    Under the learner model f_j = g + eta + delta_j the output covariance is
    W = phi 11' + D with D the delta covariance, so psi and omega are the
    phi-adjusted mean diagonal and off-diagonal of W, and the bias is the
    negated intercept.
    """
    J = cfg.J
    phi = cfg.phi
    psi = float(np.mean(np.diag(cfg.W)) - phi)
    if J > 1:
        off = (cfg.W.sum() - np.trace(cfg.W)) / (J * (J - 1))
        omega = float(off - phi)
    else:
        omega = 0.0
    return TheoryParams(
        eta=abs(cfg.mu),
        psi=max(psi, 0.0),
        omega=min(omega, max(psi, 0.0)),
        J=J,
        N=cfg.N,
        sigma2=cfg.sigma**2,
        phi=phi,
        mu=cfg.mu,
    )


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    se: float


@dataclass(frozen=True)
class OracleResult:
    mse_mean: OracleEstimate
    mse_reg: OracleEstimate
    mse_ada: OracleEstimate
    theta: float
    n_redrawn: int


def _psd_factor(W: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(W)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gaussian_oracle_mc(
    cfg: GaussianOracleConfig, theta: float, rng: RngStream
) -> OracleResult:
    """Estimate centered prediction errors E[(yhat - mu)^2] by simulation.

    Per trial: draw N training learner-output rows from N(0, W), fit the OLS
    re-weighting of y on (1, outputs), draw fresh test rows, and average the
    squared deviation of the mean-aggregate, re-weighted, and theta-blended
    predictions from the response mean. A numerically singular training draw
    is redrawn and counted.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    L = _psd_factor(cfg.W)
    J, N, T = cfg.J, cfg.N, cfg.test_points
    g0, g1 = cfg.mu, cfg.Gamma[1:]
    per_trial = np.empty((cfg.trials, 3))
    redrawn = 0
    for t in range(cfg.trials):
        gen = rng.child(t).generator()
        for _attempt in range(100):
            F = gen.standard_normal((N, J)) @ L.T
            y = g0 + F @ g1 + cfg.sigma * gen.standard_normal(N)
            X = np.column_stack([np.ones(N), F])
            gram = X.T @ X
            try:
                coef = np.linalg.solve(gram, X.T @ y)
            except np.linalg.LinAlgError:
                redrawn += 1
                continue
            if not np.isfinite(coef).all():
                redrawn += 1
                continue
            break
        else:
            raise RuntimeError("could not draw a nonsingular training matrix")
        Ft = gen.standard_normal((T, J)) @ L.T
        pred_mean = Ft.mean(axis=1)
        pred_reg = coef[0] + Ft @ coef[1:]
        pred_ada = (1.0 - theta) * pred_mean + theta * pred_reg
        mu = cfg.mu
        per_trial[t, 0] = np.mean((pred_mean - mu) ** 2)
        per_trial[t, 1] = np.mean((pred_reg - mu) ** 2)
        per_trial[t, 2] = np.mean((pred_ada - mu) ** 2)
    means = per_trial.mean(axis=0)
    ses = per_trial.std(axis=0, ddof=1) / np.sqrt(cfg.trials)
    return OracleResult(
        mse_mean=OracleEstimate(float(means[0]), float(ses[0])),
        mse_reg=OracleEstimate(float(means[1]), float(ses[1])),
        mse_ada=OracleEstimate(float(means[2]), float(ses[2])),
        theta=float(theta),
        n_redrawn=redrawn,
    )


def min_norm_oracle_mc(
    J: int,
    N: int,
    sigma2: float,
    trials: int,
    rng: RngStream,
    test_points: int = 200,
    rcond: float = 1e-10,
) -> OracleEstimate:
    """Predictive error of the minimum-norm interpolator when J > N.

    Per trial: weights Gamma_j ~ N(0, 1/J), learner outputs iid standard
    normal (W = I), minimum-norm fit via rank-revealing least squares, error
    measured against a fresh noisy response.
    """
    if J <= N:
        raise ValueError("the interpolating regime needs J > N")
    sigma = np.sqrt(sigma2)
    vals = np.empty(trials)
    for t in range(trials):
        gen = rng.child(t).generator()
        gamma = gen.normal(0.0, np.sqrt(1.0 / J), J)
        F = gen.standard_normal((N, J))
        y = F @ gamma + sigma * gen.standard_normal(N)
        coef, *_ = np.linalg.lstsq(F, y, rcond=rcond)
        Ft = gen.standard_normal((test_points, J))
        yt = Ft @ gamma + sigma * gen.standard_normal(test_points)
        vals[t] = np.mean((yt - Ft @ coef) ** 2)
    return OracleEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials)))


@dataclass(frozen=True)
class AppendixScalingResult:
    """Per-SNR learner variance/covariance estimates with log-log slopes.

    ``slope_*_raw`` regresses log psi (or omega) on log s directly;
    ``slope_*_vs_noise`` regresses log(psi / sigma2(s)) on log s, i.e. traces
    the variance relative to the shrinking noise floor. The two differ by
    exactly 1 because sigma2 = phi/s.
    """

    s_grid: np.ndarray
    sigma2_grid: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    slope_psi_raw: float
    slope_psi_vs_noise: float
    slope_omega_raw: float
    slope_omega_vs_noise: float


def _loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    good = y > 0
    if good.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[good]), np.log(y[good]), 1)[0])


def learner_scaling_mc(
    mode: str,
    s_grid: np.ndarray,
    rng: RngStream,
    beta: tuple[float, float, float] = (0.0, 1.0, 1.0),
    n: int = 200,
    n_learners: int = 40,
    replications: int = 40,
    test_points: int = 50,
) -> AppendixScalingResult:
    """Estimate the bootstrap-OLS learner variance psi(s) and covariance
    omega(s) for a bivariate linear response, under the full two-feature
    model (``mode="correct"``) or with the second feature omitted
    (``mode="misspecified"``).

    The signal level is held fixed and sigma2 = phi/s per grid point. psi is
    the total variance of one learner's prediction at a shared test point;
    omega is the between-learner covariance (the shared-data component).
    """
    if mode not in ("correct", "misspecified"):
        raise ValueError("mode must be 'correct' or 'misspecified'")
    s_grid = np.asarray(s_grid, dtype=np.float64)
    if s_grid.shape[0] < 4 or s_grid.max() / s_grid.min() < 10.0:
        raise ValueError("s_grid needs >= 4 points spanning at least a decade")
    b0, b1, b2 = beta
    phi = b1**2 + b2**2
    if phi <= 0:
        raise ValueError("signal variance is zero for this beta")
    sigma2_grid = phi / s_grid
    psi = np.empty_like(s_grid)
    omega = np.empty_like(s_grid)
    for i, s in enumerate(s_grid):
        sig = float(np.sqrt(sigma2_grid[i]))
        point = rng.child(i)
        Xt = point.child(0).generator().standard_normal((test_points, 2))
        Dt = np.column_stack([np.ones(test_points), Xt if mode == "correct" else Xt[:, :1]])
        preds = np.empty((replications, test_points, n_learners))
        for r in range(replications):
            gen = point.child(1 + r).generator()
            X = gen.standard_normal((n, 2))
            y = b0 + X @ [b1, b2] + sig * gen.standard_normal(n)
            for j in range(n_learners):
                idx = gen.integers(0, n, n)
                D = np.column_stack([np.ones(n), X[idx] if mode == "correct" else X[idx, :1]])
                coef, *_ = np.linalg.lstsq(D, y[idx], rcond=None)
                preds[r, :, j] = Dt @ coef
        within = preds.var(axis=2, ddof=1)  # bootstrap spread given the data
        between = preds.mean(axis=2).var(axis=0, ddof=1) - within.mean(axis=0) / n_learners
        between = np.maximum(between, 0.0)
        omega[i] = float(between.mean())
        psi[i] = float(within.mean() + between.mean())
    return AppendixScalingResult(
        s_grid=s_grid,
        sigma2_grid=sigma2_grid,
        psi=psi,
        omega=omega,
        slope_psi_raw=_loglog_slope(s_grid, psi),
        slope_psi_vs_noise=_loglog_slope(s_grid, psi / sigma2_grid),
        slope_omega_raw=_loglog_slope(s_grid, omega),
        slope_omega_vs_noise=_loglog_slope(s_grid, omega / sigma2_grid),
    )
