"""Shared data containers, deterministic RNG streams, and response scaling.

Everything downstream consumes randomness through :class:`RngStream` values
rather than a global generator, so any experiment re-run with the same master
seed reproduces its outputs bit-for-bit regardless of worker count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "SIGNAL_COLUMN",
    "Dataset",
    "DegenerateScaleError",
    "ResponseTransform",
    "RngStream",
    "SnrSpec",
    "derive_stream",
    "read_dataset_csv",
    "read_features_csv",
    "standardize_response",
    "write_dataset_csv",
]

# Reserved CSV column name for the simulated true signal g(x).
SIGNAL_COLUMN = "_signal"


class DegenerateScaleError(ValueError):
    """Raised when a response vector has no sample variance to scale by."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out is a and out.flags.writeable:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """A feature matrix with response, optionally carrying the true signal.

    ``signal`` is only present for simulated data and holds g(x_i) row by row.
    All arrays are stored read-only so instances can be shared across threads.
    """

    features: np.ndarray
    response: np.ndarray
    signal: Optional[np.ndarray] = None
    feature_names: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        X = _as_readonly(np.atleast_2d(self.features))
        y = _as_readonly(np.asarray(self.response).ravel())
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", y)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, p = X.shape
        if n < 2:
            raise ValueError(f"need at least 2 rows, got {n}")
        if p < 1:
            raise ValueError("need at least 1 feature column")
        if y.shape[0] != n:
            raise ValueError(f"response length {y.shape[0]} != row count {n}")
        if not np.isfinite(X).all() or not np.isfinite(y).all():
            raise ValueError("features and response must be finite")
        if self.signal is not None:
            g = _as_readonly(np.asarray(self.signal).ravel())
            if g.shape[0] != n:
                raise ValueError(f"signal length {g.shape[0]} != row count {n}")
            if not np.isfinite(g).all():
                raise ValueError("signal must be finite")
            object.__setattr__(self, "signal", g)
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != p:
                raise ValueError("feature_names length must match column count")
            object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Row-subset view (copies), keeping signal and names aligned."""
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            features=self.features[rows],
            response=self.response[rows],
            signal=None if self.signal is None else self.signal[rows],
            feature_names=self.feature_names,
        )

    def with_response(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.features, y, self.signal, self.feature_names)


@dataclass(frozen=True)
class ResponseTransform:
    """Affine response map y -> (y - center) / scale with exact inverse."""

    center: float
    scale: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.center) or not np.isfinite(self.scale):
            raise ValueError("transform parameters must be finite")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, y: np.ndarray | float) -> np.ndarray | float:
        return (y - self.center) / self.scale

    def invert(self, y: np.ndarray | float) -> np.ndarray | float:
        return y * self.scale + self.center

    @staticmethod
    def identity() -> "ResponseTransform":
        return ResponseTransform(center=0.0, scale=1.0)


def standardize_response(data: Dataset) -> tuple[Dataset, ResponseTransform]:
    """Center the response to mean 0 and scale it to sample sd 1 (divisor n-1).

    Raises :class:`DegenerateScaleError` for a constant response.
    """
    y = data.response
    center = float(np.mean(y))
    scale = float(np.std(y, ddof=1))
    if not scale > 1e-13 * max(1.0, abs(center)):
        raise DegenerateScaleError("response is constant; cannot standardize")
    transform = ResponseTransform(center=center, scale=scale)
    return data.with_response(transform.apply(y)), transform


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    # Bijective 64-bit mix (splitmix64 finalizer); keeps derived ids distinct.
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream: (master_seed, stream_id) -> bits.

    ``generator()`` always returns a fresh generator positioned at the start
    of the stream, so a stream value can be passed between threads as long as
    each consumer derives its own child first.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) <= _MASK64):
                raise ValueError(f"{name} must be an unsigned 64-bit integer")
            object.__setattr__(self, name, int(v))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(seq)

    def child(self, k: int) -> "RngStream":
        """Derive the k-th sub-stream; distinct k give unrelated streams."""
        if k < 0:
            raise ValueError("child index must be nonnegative")
        mixed = _splitmix64((self.stream_id * _GOLDEN + k + 1) & _MASK64)
        return RngStream(self.master_seed, mixed)


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Construct the deterministic stream for (master_seed, stream_id)."""
    return RngStream(master_seed=master_seed, stream_id=stream_id)


@dataclass(frozen=True)
class SnrSpec:
    """Signal level phi, signal-to-noise ratio s, and noise variance sigma2."""

    phi: float
    s: float
    sigma2: float

    def __post_init__(self) -> None:
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")
        if self.s <= 0:
            raise ValueError("snr must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.phi > 0 and abs(self.sigma2 * self.s - self.phi) > 1e-9 * max(1.0, self.phi):
            raise ValueError("inconsistent spec: sigma2 * s must equal phi")

    @classmethod
    def from_phi_s(cls, phi: float, s: float) -> "SnrSpec":
        if phi <= 0:
            raise ValueError("phi must be positive to derive a noise level")
        return cls(phi=float(phi), s=float(s), sigma2=float(phi) / float(s))

    def at_snr(self, s: float) -> "SnrSpec":
        """Same signal level, recalibrated noise for a new SNR."""
        return SnrSpec.from_phi_s(self.phi, s)


def _parse_cell(value: str, row: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"non-numeric cell {value!r} in column {col!r}, data row {row}") from None


def read_dataset_csv(path: str, response_column: str) -> Dataset:
    """Read a headered CSV into a Dataset; non-numeric cells are an error.

    The response column is selected by name; a column named ``_signal`` (if
    present) is loaded as the true signal; every other column is a feature.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        rows = list(reader)
    if response_column not in header:
        raise ValueError(f"{path}: response column {response_column!r} not in header {header}")
    feature_cols = [c for c in header if c not in (response_column, SIGNAL_COLUMN)]
    if not feature_cols:
        raise ValueError(f"{path}: no feature columns besides {response_column!r}")
    idx = {c: header.index(c) for c in header}
    n = len(rows)
    X = np.empty((n, len(feature_cols)))
    y = np.empty(n)
    g = np.empty(n) if SIGNAL_COLUMN in header else None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for j, c in enumerate(feature_cols):
            X[i, j] = _parse_cell(row[idx[c]], i, c)
        y[i] = _parse_cell(row[idx[response_column]], i, response_column)
        if g is not None:
            g[i] = _parse_cell(row[idx[SIGNAL_COLUMN]], i, SIGNAL_COLUMN)
    return Dataset(features=X, response=y, signal=g, feature_names=tuple(feature_cols))


def read_features_csv(path: str) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read a feature-only CSV (used for prediction); zero rows are allowed."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        cols = [c for c in header if c != SIGNAL_COLUMN]
        keep = [header.index(c) for c in cols]
        rows = list(reader)
    X = np.empty((len(rows), len(cols)))
    for i, row in enumerate(rows):
        for j, k in enumerate(keep):
            X[i, j] = _parse_cell(row[k], i, cols[j])
    return X, tuple(cols)


def write_dataset_csv(data: Dataset, path: str, response_column: str = "response") -> None:
    """Write a Dataset to CSV; the signal column uses the reserved name."""
    names = data.feature_names or tuple(f"x{j + 1}" for j in range(data.n_features))
    header: list[str] = list(names) + [response_column]
    if data.signal is not None:
        header.append(SIGNAL_COLUMN)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_rows):
            row = [repr(float(v)) for v in data.features[i]]
            row.append(repr(float(data.response[i])))
            if data.signal is not None:
                row.append(repr(float(data.signal[i])))
            writer.writerow(row)
