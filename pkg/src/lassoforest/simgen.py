"""Synthetic data generators with exact signal-to-noise calibration.

Two generating processes: a sparse polynomial (linear + pairwise interaction
terms in iid standard-normal features, signal variance known in closed form)
and a chained tree ensemble (random shallow step functions with geometric
carry-over between neighbors, signal variance estimated once on a large
held-out draw and then frozen so a sweep varies only the noise).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Dataset, RngStream, SnrSpec
from .forest import RegressionTree, TreeParams, predict_rows, _fit_tree_with_generator

__all__ = [
    "PolyDgpSpec",
    "TreeDgpSpec",
    "ZeroSignalError",
    "analytic_signal_variance",
    "calibrate_noise",
    "draw_polynomial_spec",
    "draw_tree_spec",
    "fixed_support_spec",
    "gen_polynomial",
    "gen_tree_ensemble",
]

_MAX_REDRAWS = 100
PHI_ESTIMATE_ROWS = 100_000


class ZeroSignalError(ValueError):
    """Raised when a drawn signal has no variance (SNR undefined)."""


@dataclass(frozen=True)
class PolyDgpSpec:
    """Realized polynomial process: y = alpha.x + sum_{j<k} beta_jk x_j x_k + eps."""

    n: int
    p: int
    c: float
    pi: float
    alpha: np.ndarray  # (p,)
    beta: np.ndarray  # (p, p), strictly upper triangular
    snr: SnrSpec

    def __post_init__(self) -> None:
        if self.alpha.shape != (self.p,) or self.beta.shape != (self.p, self.p):
            raise ValueError("coefficient shapes must match p")
        if np.any(np.tril(self.beta) != 0):
            raise ValueError("beta must be strictly upper triangular")

    def at_snr(self, s: float) -> "PolyDgpSpec":
        return replace(self, snr=self.snr.at_snr(s))


def _sparse_uniform(gen: np.random.Generator, size: int, c: float, pi: float) -> np.ndarray:
    # Draw both masks and magnitudes unconditionally so the stream consumption
    # does not depend on the realized sparsity pattern.
    keep = gen.random(size) < pi
    mags = gen.uniform(0.0, c, size)
    return np.where(keep, mags, 0.0)


def draw_polynomial_spec(
    n: int, p: int, s: float, c: float = 0.1, pi: float = 0.5, rng: RngStream | None = None
) -> PolyDgpSpec:
    """Draw sparse coefficients (redrawing an all-zero draw up to 100 times)."""
    if rng is None:
        raise ValueError("rng is required")
    gen = rng.generator()
    n_pairs = p * (p - 1) // 2
    iu = np.triu_indices(p, k=1)
    for _ in range(_MAX_REDRAWS):
        alpha = _sparse_uniform(gen, p, c, pi)
        beta = np.zeros((p, p))
        beta[iu] = _sparse_uniform(gen, n_pairs, c, pi)
        phi = float(np.sum(alpha**2) + np.sum(beta**2))
        if phi > 0:
            return PolyDgpSpec(
                n=n, p=p, c=c, pi=pi, alpha=alpha, beta=beta, snr=SnrSpec.from_phi_s(phi, s)
            )
    raise ZeroSignalError("all coefficient draws were zero; SNR undefined")


def fixed_support_spec(n: int, p: int, s: float, support: int = 5, coef: float = 0.1) -> PolyDgpSpec:
    """Linear signal with identical fixed coefficients on the first features."""
    if not 1 <= support <= p:
        raise ValueError("support must be in [1, p]")
    alpha = np.zeros(p)
    alpha[:support] = coef
    phi = float(np.sum(alpha**2))
    return PolyDgpSpec(
        n=n, p=p, c=coef, pi=1.0, alpha=alpha, beta=np.zeros((p, p)),
        snr=SnrSpec.from_phi_s(phi, s),
    )


def analytic_signal_variance(spec: PolyDgpSpec) -> float:
    """Closed-form Var(signal): the monomials x_j and x_j x_k (j<k) are
    uncorrelated with unit variance under iid standard-normal features."""
    return float(np.sum(spec.alpha**2) + np.sum(spec.beta**2))


def _poly_signal(spec: PolyDgpSpec, X: np.ndarray) -> np.ndarray:
    g = X @ spec.alpha
    rows, cols = np.nonzero(spec.beta)
    if rows.size:
        g = g + (X[:, rows] * X[:, cols]) @ spec.beta[rows, cols]
    return g


def gen_polynomial(spec: PolyDgpSpec, rng: RngStream, n_rows: Optional[int] = None) -> Dataset:
    """Draw one dataset from the polynomial process, storing the true signal."""
    n = spec.n if n_rows is None else int(n_rows)
    gen = rng.generator()
    X = gen.standard_normal((n, spec.p))
    g = _poly_signal(spec, X)
    y = g + gen.normal(0.0, np.sqrt(spec.snr.sigma2), n)
    return Dataset(features=X, response=y, signal=g)


@dataclass(frozen=True)
class TreeDgpSpec:
    """Realized chained-tree process: shallow random trees T0_j, chained as
    T_j = T0_j(X) + rho * T_{j-1}, with y = sum_j beta_j T_j + eps."""

    n: int
    p: int
    rho: float
    c: float
    pi: float
    beta: np.ndarray  # (p,)
    base_trees: tuple[RegressionTree, ...]
    snr: SnrSpec

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.beta.shape != (self.p,) or len(self.base_trees) != self.p:
            raise ValueError("need one beta and one base tree per feature")

    def at_snr(self, s: float) -> "TreeDgpSpec":
        return replace(self, snr=self.snr.at_snr(s))


def chained_tree_columns(spec: TreeDgpSpec, X: np.ndarray) -> np.ndarray:
    """Evaluate the chained tree columns T_1..T_p at the given rows."""
    T = np.empty((X.shape[0], spec.p))
    for j, tree in enumerate(spec.base_trees):
        base = predict_rows(tree, X)
        T[:, j] = base if j == 0 else base + spec.rho * T[:, j - 1]
    return T


def _tree_signal(spec: TreeDgpSpec, X: np.ndarray) -> np.ndarray:
    return chained_tree_columns(spec, X) @ spec.beta


def draw_tree_spec(
    n: int,
    p: int,
    s: float,
    rho: float = 0.5,
    c: float = 0.1,
    pi: float = 0.5,
    rng: RngStream | None = None,
    phi_rows: int = PHI_ESTIMATE_ROWS,
) -> TreeDgpSpec:
    """Realize the chained-tree process and freeze its signal variance.

    Each base tree is a 5-leaf stump ensemble member fit to a fresh standard
    normal noise vector on a fresh bootstrap of a reference feature draw; the
    signal variance is estimated on an independent large draw and then held
    fixed so every SNR level in a sweep shares the same signal.
    """
    if rng is None:
        raise ValueError("rng is required")
    gen = rng.child(0).generator()
    X_ref = gen.standard_normal((n, p))
    ref = Dataset(features=X_ref, response=np.zeros(n))
    params = TreeParams(mtry=None, min_node_size=5, max_leaf_nodes=5)
    trees = []
    for _ in range(p):
        y0 = gen.standard_normal(n)
        bag = gen.integers(0, n, size=n, dtype=np.int64)
        trees.append(_fit_tree_with_generator(ref.with_response(y0), bag, params, gen))

    beta = None
    for _ in range(_MAX_REDRAWS):
        cand = _sparse_uniform(gen, p, c, pi)
        if np.any(cand != 0):
            beta = cand
            break
    if beta is None:
        raise ZeroSignalError("all coefficient draws were zero; SNR undefined")

    probe = TreeDgpSpec(
        n=n, p=p, rho=rho, c=c, pi=pi, beta=beta, base_trees=tuple(trees),
        snr=SnrSpec(phi=1.0, s=1.0, sigma2=1.0),
    )
    X_eval = rng.child(1).generator().standard_normal((phi_rows, p))
    g_eval = _tree_signal(probe, X_eval)
    phi = float(np.var(g_eval, ddof=1))
    if phi <= 0:
        raise ZeroSignalError("chained tree signal has zero variance")
    return replace(probe, snr=SnrSpec.from_phi_s(phi, s))


def gen_tree_ensemble(spec: TreeDgpSpec, rng: RngStream, n_rows: Optional[int] = None) -> Dataset:
    """Draw one dataset from the chained-tree process, storing the signal."""
    n = spec.n if n_rows is None else int(n_rows)
    gen = rng.generator()
    X = gen.standard_normal((n, spec.p))
    g = _tree_signal(spec, X)
    y = g + gen.normal(0.0, np.sqrt(spec.snr.sigma2), n)
    return Dataset(features=X, response=y, signal=g)


def calibrate_noise(signal: np.ndarray, snr: float) -> float:
    """Noise variance sigma2 = Var(signal) / snr (sample variance, ddof=1)."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    var = float(np.var(np.asarray(signal, dtype=np.float64), ddof=1))
    if var <= 0:
        raise ZeroSignalError("signal has zero variance")
    return var / snr
