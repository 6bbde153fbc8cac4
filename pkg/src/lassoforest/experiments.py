"""Simulation pipelines: SNR sweep, bias-variance decomposition, error-estimate
accuracy, and importance recovery.

All pipelines share one frame: per replication, draw one realization of the
generating process (signal coefficients fixed), then per SNR regenerate data
with the noise recalibrated, fit the three estimators with shared seeds, and
score on a fresh test draw. The three estimators share one cross-fit forest:
"vanilla" is its plain mean aggregation (the theta=0 special case), so method
differences isolate the second stage. Reports are deterministic functions of
(config, master seed) and are assembled in (snr, rep) key order regardless of
worker count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import Dataset, RngStream, standardize_response
from .ensemble import (
    DegenerateImportanceError,
    FitConfig,
    LassoedModel,
    fit_both,
    fit_lassoed,
    fit_post_selection,
    predict_lassoed_rows,
    vanilla_importance,
    variable_importance,
)
from .forest import forest_mean_predict_rows
from .simgen import (
    PolyDgpSpec,
    TreeDgpSpec,
    draw_polynomial_spec,
    draw_tree_spec,
    fixed_support_spec,
    gen_polynomial,
    gen_tree_ensemble,
)

__all__ = [
    "DecompositionCell",
    "DecompositionReport",
    "ErrorEstimateReport",
    "ImportanceReport",
    "MethodFit",
    "PolyDgpConfig",
    "SweepConfig",
    "SweepRecord",
    "SweepReport",
    "TreeDgpConfig",
    "FixedSupportDgpConfig",
    "METHODS",
    "bias_variance_decomposition",
    "error_estimate_accuracy",
    "importance_recovery",
    "snr_sweep",
]

METHODS = ("vanilla", "post_selection", "lassoed")


@dataclass(frozen=True)
class PolyDgpConfig:
    n: int
    p: int
    c: float = 0.1
    pi: float = 0.5

    def realize(self, s: float, rng: RngStream):
        return draw_polynomial_spec(self.n, self.p, s, self.c, self.pi, rng)


@dataclass(frozen=True)
class TreeDgpConfig:
    n: int
    p: int
    rho: float = 0.5
    c: float = 0.1
    pi: float = 0.5

    def realize(self, s: float, rng: RngStream):
        return draw_tree_spec(self.n, self.p, s, self.rho, self.c, self.pi, rng)


@dataclass(frozen=True)
class FixedSupportDgpConfig:
    """Linear signal with identical coefficients on the first ``support``
    features; the importance-recovery pipeline requires this process."""

    n: int
    p: int
    support: int = 5
    coef: float = 0.1

    def realize(self, s: float, rng: RngStream):
        return fixed_support_spec(self.n, self.p, s, self.support, self.coef)


DgpConfig = Union[PolyDgpConfig, TreeDgpConfig, FixedSupportDgpConfig]


def _generate(spec, rng: RngStream, n_rows: Optional[int] = None) -> Dataset:
    if isinstance(spec, PolyDgpSpec):
        return gen_polynomial(spec, rng, n_rows)
    if isinstance(spec, TreeDgpSpec):
        return gen_tree_ensemble(spec, rng, n_rows)
    raise TypeError(f"unknown generating spec {type(spec)!r}")


@dataclass(frozen=True)
class SweepConfig:
    dgp: DgpConfig
    snr_grid: tuple[float, ...]
    replications: int
    fit: FitConfig
    test_size: int = 1000

    def __post_init__(self) -> None:
        grid = tuple(float(s) for s in self.snr_grid)
        if sorted(grid) != list(grid) or len(set(grid)) != len(grid):
            raise ValueError("snr_grid must be ascending and unique")
        if any(s <= 0 for s in grid):
            raise ValueError("snr values must be positive")
        object.__setattr__(self, "snr_grid", grid)
        if self.replications < 2:
            raise ValueError("need at least 2 replications")
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")


@dataclass(frozen=True)
class MethodFit:
    """One replication cell: the shared-forest fits plus scores."""

    post_model: LassoedModel
    lassoed_model: LassoedModel
    test_mse: dict[str, float]
    est_error: dict[str, float]
    theta_hat: float


def _offset_score(model: LassoedModel, train: Dataset) -> float:
    """Held-out error of the plain tree average on the selection half."""
    from .forest import prediction_matrix

    rows = train.subset(model.split_d2)
    tbar = prediction_matrix(model.forest, rows, in_sample=False).values.mean(axis=1)
    y2 = model.transform.apply(rows.response)
    return float(np.mean((y2 - tbar) ** 2))


def _fit_cell(train: Dataset, test: Dataset, fit_cfg: FitConfig, seed: int) -> MethodFit:
    cfg = replace(fit_cfg, seed=int(seed))
    post, lassoed = fit_both(train, cfg)
    scale2 = post.transform.scale**2

    pred_vanilla = post.transform.invert(forest_mean_predict_rows(post.forest, test.features))
    preds = {
        "vanilla": np.asarray(pred_vanilla),
        "post_selection": predict_lassoed_rows(post, test.features),
        "lassoed": predict_lassoed_rows(lassoed, test.features),
    }
    test_mse = {m: float(np.mean((test.response - p) ** 2)) for m, p in preds.items()}

    # Estimated errors on the original response scale: the held-out offset
    # score for the plain aggregate, the CV error at the chosen lambda for the
    # re-weighted fit, and the selected grid point's estimate for the blend.
    theta0_err = lassoed.cv_curve.get(0.0)
    if theta0_err is None:
        theta0_err = _offset_score(post, train)
    est_error = {
        "vanilla": float(theta0_err) * scale2,
        "post_selection": float(post.cv_curve[1.0]) * scale2,
        "lassoed": float(lassoed.cv_curve[lassoed.theta_hat]) * scale2,
    }
    return MethodFit(
        post_model=post,
        lassoed_model=lassoed,
        test_mse=test_mse,
        est_error=est_error,
        theta_hat=lassoed.theta_hat,
    )


@dataclass(frozen=True)
class SweepRecord:
    snr: float
    method: str
    rep: int
    test_mse: float
    theta_hat: float
    est_error: float


@dataclass(frozen=True)
class SweepReport:
    records: tuple[SweepRecord, ...]
    snr_grid: tuple[float, ...]
    replications: int

    def mse_matrix(self, method: str) -> np.ndarray:
        """(n_snr, reps) test MSE table for one method."""
        out = np.full((len(self.snr_grid), self.replications), np.nan)
        for rec in self.records:
            if rec.method == method:
                out[self.snr_grid.index(rec.snr), rec.rep] = rec.test_mse
        return out

    def mean_mse(self, method: str) -> np.ndarray:
        return self.mse_matrix(method).mean(axis=1)

    def to_rows(self) -> list[dict]:
        return [
            {
                "snr": r.snr,
                "method": r.method,
                "rep": r.rep,
                "test_mse": r.test_mse,
                "theta_hat": r.theta_hat,
                "est_error": r.est_error,
            }
            for r in self.records
        ]


def _rep_specs(cfg: SweepConfig, rng: RngStream):
    """One realized process per replication, shared across the SNR grid."""
    for rep in range(cfg.replications):
        rep_rng = rng.child(rep)
        spec = cfg.dgp.realize(cfg.snr_grid[0], rep_rng.child(0))
        yield rep, rep_rng, spec


def _parallel_map(fn, jobs, n_workers: int):
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def snr_sweep(cfg: SweepConfig, rng: RngStream, n_workers: int = 1) -> SweepReport:
    """Test error of the three estimators per (snr, replication)."""

    def run_rep(args) -> list[SweepRecord]:
        rep, rep_rng, spec = args
        out = []
        for si, s in enumerate(cfg.snr_grid):
            sspec = spec.at_snr(s)
            train = _generate(sspec, rep_rng.child(10 + 3 * si))
            test = _generate(sspec, rep_rng.child(11 + 3 * si), n_rows=cfg.test_size)
            fit = _fit_cell(train, test, cfg.fit, rep_rng.child(12 + 3 * si).stream_id)
            for m in METHODS:
                out.append(
                    SweepRecord(
                        snr=s, method=m, rep=rep, test_mse=fit.test_mse[m],
                        theta_hat=fit.theta_hat if m == "lassoed" else (1.0 if m == "post_selection" else 0.0),
                        est_error=fit.est_error[m],
                    )
                )
        return out

    chunks = _parallel_map(run_rep, list(_rep_specs(cfg, rng)), n_workers)
    records = tuple(rec for chunk in chunks for rec in sorted(chunk, key=lambda r: (r.snr, r.method)))
    return SweepReport(records=records, snr_grid=cfg.snr_grid, replications=cfg.replications)


FitPredictFn = Callable[[Dataset, np.ndarray, int], np.ndarray]


def _standard_methods(fit_cfg: FitConfig) -> dict[str, FitPredictFn]:
    def fit_all(train: Dataset, X: np.ndarray, seed: int) -> dict[str, np.ndarray]:
        cfg = replace(fit_cfg, seed=int(seed))
        post, lassoed = fit_both(train, cfg)
        vanilla = post.transform.invert(forest_mean_predict_rows(post.forest, X))
        return {
            "vanilla": np.asarray(vanilla),
            "post_selection": predict_lassoed_rows(post, X),
            "lassoed": predict_lassoed_rows(lassoed, X),
        }

    return fit_all  # type: ignore[return-value]


@dataclass(frozen=True)
class DecompositionCell:
    snr: float
    method: str
    squared_bias: float
    variance: float
    noise_floor: float
    total: float
    mse_vs_signal: float
    direct_mse: float
    identity_gap: float


@dataclass(frozen=True)
class DecompositionReport:
    cells: tuple[DecompositionCell, ...]

    def cell(self, snr: float, method: str) -> DecompositionCell:
        for c in self.cells:
            if c.snr == snr and c.method == method:
                return c
        raise KeyError((snr, method))

    def to_rows(self) -> list[dict]:
        return [c.__dict__.copy() for c in self.cells]


def bias_variance_decomposition(
    cfg: SweepConfig,
    rng: RngStream,
    n_workers: int = 1,
    methods: Optional[Callable[[Dataset, np.ndarray, int], dict[str, np.ndarray]]] = None,
) -> DecompositionReport:
    """Squared bias / variance / noise split against a fixed test set.

    One realization of the process and one test set (with known signal) are
    fixed; each replication redraws the training data only. Per test point,
    bias is the mean prediction error against the signal and variance is the
    population variance of predictions across replications, so
    ``squared_bias + variance`` equals the against-signal MSE identically;
    ``direct_mse`` scores against the fixed noisy test response, which matches
    ``squared_bias + variance + noise_floor`` only up to Monte Carlo error
    (recorded as ``identity_gap``).
    """
    if cfg.replications < 10:
        raise ValueError("decomposition needs at least 10 replications")
    fit_all = methods if methods is not None else _standard_methods(cfg.fit)
    spec0 = cfg.dgp.realize(cfg.snr_grid[0], rng.child(0))
    test = _generate(spec0, rng.child(1), n_rows=cfg.test_size)
    if test.signal is None:
        raise ValueError("decomposition requires a generating process that stores the signal")

    cells: list[DecompositionCell] = []
    for si, s in enumerate(cfg.snr_grid):
        sspec = spec0.at_snr(s)
        test_s = _generate(sspec, rng.child(1), n_rows=cfg.test_size)  # same X stream, new noise scale

        def run_rep(rep: int) -> dict[str, np.ndarray]:
            rep_rng = rng.child(100 + si * 1000 + rep)
            train = _generate(sspec, rep_rng.child(0))
            return fit_all(train, test_s.features, rep_rng.child(1).stream_id)

        preds_by_rep = _parallel_map(run_rep, list(range(cfg.replications)), n_workers)
        for method in sorted(preds_by_rep[0]):
            P = np.stack([d[method] for d in preds_by_rep])  # (reps, test points)
            g = test_s.signal
            bias = P.mean(axis=0) - g
            var = P.var(axis=0, ddof=0)
            squared_bias = float(np.mean(bias**2))
            variance = float(np.mean(var))
            mse_vs_signal = float(np.mean((P - g[None, :]) ** 2))
            direct = float(np.mean((P - test_s.response[None, :]) ** 2))
            noise = sspec.snr.sigma2
            total = squared_bias + variance + noise
            cells.append(
                DecompositionCell(
                    snr=s, method=method,
                    squared_bias=squared_bias, variance=variance, noise_floor=noise,
                    total=total, mse_vs_signal=mse_vs_signal, direct_mse=direct,
                    identity_gap=abs(total - direct),
                )
            )
    return DecompositionReport(cells=tuple(cells))


@dataclass(frozen=True)
class ErrorEstimateRecord:
    snr: float
    method: str
    rep: int
    true_err: float
    est_err: float


@dataclass(frozen=True)
class ErrorEstimateReport:
    records: tuple[ErrorEstimateRecord, ...]
    sign_agreement: dict[float, float]

    def to_rows(self) -> list[dict]:
        return [
            {"true_err": r.true_err, "est_err": r.est_err, "method": r.method,
             "snr": r.snr, "rep": r.rep}
            for r in self.records
        ]


def error_estimate_accuracy(cfg: SweepConfig, rng: RngStream, n_workers: int = 1) -> ErrorEstimateReport:
    """Held-out/CV error estimates vs true test error, with the rate at which
    the estimated post-vs-vanilla difference has the correct sign."""

    def run_rep(args):
        rep, rep_rng, spec = args
        recs = []
        for si, s in enumerate(cfg.snr_grid):
            sspec = spec.at_snr(s)
            train = _generate(sspec, rep_rng.child(10 + 3 * si))
            test = _generate(sspec, rep_rng.child(11 + 3 * si), n_rows=cfg.test_size)
            fit = _fit_cell(train, test, cfg.fit, rep_rng.child(12 + 3 * si).stream_id)
            for m in ("vanilla", "post_selection"):
                recs.append(
                    ErrorEstimateRecord(
                        snr=s, method=m, rep=rep,
                        true_err=fit.test_mse[m], est_err=fit.est_error[m],
                    )
                )
        return recs

    chunks = _parallel_map(run_rep, list(_rep_specs(cfg, rng)), n_workers)
    records = tuple(rec for chunk in chunks for rec in chunk)
    agreement: dict[float, float] = {}
    for s in cfg.snr_grid:
        agree = []
        for rep in range(cfg.replications):
            pair = {r.method: r for r in records if r.snr == s and r.rep == rep}
            true_diff = pair["post_selection"].true_err - pair["vanilla"].true_err
            est_diff = pair["post_selection"].est_err - pair["vanilla"].est_err
            agree.append(np.sign(true_diff) == np.sign(est_diff))
        agreement[s] = float(np.mean(agree))
    return ErrorEstimateReport(records=records, sign_agreement=agreement)


@dataclass(frozen=True)
class ImportanceRecord:
    snr: float
    method: str
    rep: int
    recovery: float
    used_fallback: bool


@dataclass(frozen=True)
class ImportanceReport:
    records: tuple[ImportanceRecord, ...]
    support: int

    def mean_recovery(self, method: str, snr: float) -> float:
        vals = [r.recovery for r in self.records if r.method == method and r.snr == snr]
        return float(np.mean(vals))

    def to_rows(self) -> list[dict]:
        return [
            {"snr": r.snr, "method": r.method, "rep": r.rep,
             "recovery": r.recovery, "used_fallback": r.used_fallback}
            for r in self.records
        ]


def importance_recovery(cfg: SweepConfig, rng: RngStream, n_workers: int = 1) -> ImportanceReport:
    """Share of split-count importance landing on the true support.

    Requires the fixed-support process. When the signed weighted counts are
    degenerate (all selected weights zero or cancelling), the record falls
    back to absolute weights and is flagged.
    """
    if not isinstance(cfg.dgp, FixedSupportDgpConfig):
        raise ValueError("importance_recovery needs the fixed-support process")
    support = cfg.dgp.support

    def kappa_or_fallback(model: LassoedModel) -> tuple[np.ndarray, bool]:
        try:
            return variable_importance(model).kappa, False
        except DegenerateImportanceError:
            return variable_importance(model, absolute=True).kappa, True

    def run_rep(args):
        rep, rep_rng, spec = args
        recs = []
        for si, s in enumerate(cfg.snr_grid):
            sspec = spec.at_snr(s)
            train = _generate(sspec, rep_rng.child(10 + 3 * si))
            cfg_fit = replace(cfg.fit, seed=int(rep_rng.child(12 + 3 * si).stream_id))
            post, lassoed = fit_both(train, cfg_fit)
            kv = vanilla_importance(post.forest).kappa
            kp, fp = kappa_or_fallback(post)
            kl, fl = kappa_or_fallback(lassoed)
            for m, (k, fb) in {
                "vanilla": (kv, False),
                "post_selection": (kp, fp),
                "lassoed": (kl, fl),
            }.items():
                recs.append(
                    ImportanceRecord(
                        snr=s, method=m, rep=rep,
                        recovery=float(np.sum(k[:support])), used_fallback=fb,
                    )
                )
        return recs

    chunks = _parallel_map(run_rep, list(_rep_specs(cfg, rng)), n_workers)
    return ImportanceReport(
        records=tuple(r for chunk in chunks for r in chunk),
        support=support,
    )
