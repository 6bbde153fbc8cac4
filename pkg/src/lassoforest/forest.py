"""CART regression trees, bagging, out-of-bag bookkeeping, and split counts.

Trees are grown best-first: the splittable node with the largest SSE
improvement is expanded next, so a leaf cap keeps the most valuable splits.
Split search minimizes the summed child SSE over midpoint thresholds of the
``mtry`` sampled candidate features; ties break on (feature index, threshold)
and ``<=`` routes left, which pins down the tree for golden tests.
"""

from __future__ import annotations

import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Dataset, RngStream, _splitmix64

__all__ = [
    "Forest",
    "RegressionTree",
    "TreeParams",
    "bootstrap_sample",
    "default_mtry",
    "fit_forest",
    "fit_tree",
    "forest_from_json",
    "forest_mean_predict",
    "forest_mean_predict_rows",
    "forest_to_json",
    "oob_predictions",
    "prediction_matrix",
    "predict_rows",
    "predict_tree",
    "split_counts",
]

FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    """Tree growth controls. ``mtry=None`` means max(1, p // 3) at fit time."""

    mtry: Optional[int] = None
    min_node_size: int = 5
    max_leaf_nodes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.max_leaf_nodes is not None and self.max_leaf_nodes < 2:
            raise ValueError("max_leaf_nodes must be >= 2 when set")

    def resolve_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else default_mtry(p)
        if m > p:
            raise ValueError(f"mtry={m} exceeds feature count p={p}")
        return m


def default_mtry(p: int) -> int:
    return max(1, p // 3)


@dataclass(frozen=True)
class RegressionTree:
    """Flat-array binary tree; ``split_var == -1`` marks a leaf node.

    ``in_bag`` holds the training row indices (with multiplicity, in draw
    order) relative to the dataset the tree was fit on.
    """

    split_var: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    in_bag: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return self.split_var.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.split_var < 0))

    @property
    def n_internal(self) -> int:
        return self.n_nodes - self.n_leaves


@dataclass(frozen=True)
class Forest:
    trees: tuple[RegressionTree, ...]
    params: TreeParams
    seed: int
    n_features: int
    n_train_rows: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def bootstrap_sample(n: int, rng: RngStream) -> np.ndarray:
    """Draw n row indices uniformly with replacement from {0..n-1}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.generator().integers(0, n, size=n, dtype=np.int64)


def _bootstrap_from_generator(n: int, gen: np.random.Generator) -> np.ndarray:
    return gen.integers(0, n, size=n, dtype=np.int64)


def _node_features(node_key: int, p: int, mtry: int) -> np.ndarray:
    """Sample mtry feature indices without replacement for one node.

    Driven by a splitmix64 stream keyed on the node's path, so the draw does
    not depend on the order in which nodes are expanded.
    """
    if mtry >= p:
        return np.arange(p)
    state = node_key
    idx = np.arange(p)
    for i in range(mtry):
        state = _splitmix64(state)
        j = i + state % (p - i)
        idx[i], idx[j] = idx[j], idx[i]
    return np.sort(idx[:mtry])


# Splits whose scores agree to this relative tolerance count as tied; exact
# ties are common (different cuts inducing the same row partition), and a
# strict float comparison would flip winners under last-digit response noise.
_TIE_RTOL = 1e-10


def _best_split(X: np.ndarray, y: np.ndarray, rows: np.ndarray, feats: np.ndarray):
    """Best (feature, threshold) minimizing child SSE over midpoint cuts.

    Returns (improvement, feature, threshold, left_rows, right_rows) or None
    when no candidate feature admits a valid split. Ties resolve to the
    lowest feature index, then the smallest threshold.
    """
    m = rows.shape[0]
    sub = X[np.ix_(rows, feats)]
    order = np.argsort(sub, axis=0, kind="stable")
    vals = np.take_along_axis(sub, order, axis=0)
    ysort = y[rows][order]

    csum = np.cumsum(ysort, axis=0)
    total = csum[-1, :]
    # score(i) = s_l^2/n_l + s_r^2/n_r for a cut after sorted position i-1;
    # minimizing child SSE is equivalent to maximizing this score.
    counts_l = np.arange(1, m, dtype=np.float64)[:, None]
    s_l = csum[:-1, :]
    s_r = total[None, :] - s_l
    score = s_l * s_l / counts_l + s_r * s_r / (m - counts_l)
    valid = vals[1:, :] > vals[:-1, :]
    score = np.where(valid, score, -np.inf)

    top = float(np.max(score))
    base = float(total[0] * total[0]) / m
    if not np.isfinite(top):
        return None
    improvement = top - base
    if improvement <= 0.0:
        return None
    # Group near-ties, then resolve toward the lowest feature index and
    # smallest threshold; feats is sorted so column order follows feature
    # order and cut position orders thresholds within a column.
    cutoff = top - _TIE_RTOL * (abs(top) + 1e-300)
    best = None
    for col in np.flatnonzero(np.max(score, axis=0) >= cutoff):
        i = int(np.flatnonzero(score[:, col] >= cutoff)[0])
        thr = 0.5 * (vals[i, col] + vals[i + 1, col])
        cand = (int(feats[col]), float(thr), i, int(col))
        if best is None or cand[:2] < best[:2]:
            best = cand
    feat, thr, i, col = best
    improvement = float(score[i, col] - base)
    if improvement <= 0.0:
        return None
    left_rows = rows[order[: i + 1, col]]
    right_rows = rows[order[i + 1 :, col]]
    return improvement, feat, thr, left_rows, right_rows


def fit_tree(
    data: Dataset, rows: np.ndarray, params: TreeParams, rng: RngStream
) -> RegressionTree:
    """Grow one tree on the given row multiset (best-first, see module doc)."""
    gen = rng.generator()
    key = _splitmix64(rng.stream_id ^ rng.master_seed)
    return _fit_tree_with_generator(data, np.asarray(rows, dtype=np.int64), params, gen, key)


def _fit_tree_with_generator(
    data: Dataset, rows: np.ndarray, params: TreeParams,
    gen: np.random.Generator, tree_key: int = 0
) -> RegressionTree:
    X, y = data.features, data.response
    p = data.n_features
    mtry = params.resolve_mtry(p)
    if rows.shape[0] < 1:
        raise ValueError("rows must be nonempty")
    if rows.min() < 0 or rows.max() >= data.n_rows:
        raise ValueError("row index out of range")
    cap = params.max_leaf_nodes if params.max_leaf_nodes is not None else np.inf
    if tree_key == 0:
        tree_key = int(gen.integers(0, 2**63, dtype=np.int64))

    split_var: list[int] = [-1]
    threshold: list[float] = [np.nan]
    left: list[int] = [-1]
    right: list[int] = [-1]
    value: list[float] = [float(np.mean(y[rows]))]

    # Heap of candidate splits ordered by (-improvement, creation index); the
    # creation-index tiebreak keeps growth order deterministic.
    heap: list[tuple[float, int, tuple]] = []

    def consider(node_id: int, node_key: int, node_rows: np.ndarray) -> None:
        m = node_rows.shape[0]
        if m < 2 * params.min_node_size:
            return
        ynode = y[node_rows]
        if np.ptp(ynode) == 0.0:
            return  # pure node
        feats = _node_features(node_key, p, mtry)
        found = _best_split(X, y, node_rows, feats)
        if found is None:
            return
        improvement, feat, thr, lrows, rrows = found
        heapq.heappush(heap, (-improvement, node_id, (node_key, feat, thr, lrows, rrows)))

    root_key = _splitmix64(tree_key ^ 1)
    consider(0, root_key, rows)
    n_leaves = 1
    while heap and n_leaves < cap:
        _, node_id, (node_key, feat, thr, lrows, rrows) = heapq.heappop(heap)
        lid, rid = len(split_var), len(split_var) + 1
        split_var[node_id] = feat
        threshold[node_id] = thr
        left[node_id] = lid
        right[node_id] = rid
        for child_rows in (lrows, rrows):
            split_var.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            value.append(float(np.mean(y[child_rows])))
        n_leaves += 1
        consider(lid, _splitmix64(node_key * 2 + 2), lrows)
        consider(rid, _splitmix64(node_key * 2 + 3), rrows)

    return RegressionTree(
        split_var=np.asarray(split_var, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
        in_bag=rows.astype(np.int64),
        n_features=p,
    )


def predict_tree(tree: RegressionTree, x: np.ndarray) -> float:
    """Route a single feature vector to its leaf; ``<=`` goes left."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != tree.n_features:
        raise ValueError(f"expected {tree.n_features} features, got {x.shape[0]}")
    node = 0
    while tree.split_var[node] >= 0:
        if x[tree.split_var[node]] <= tree.threshold[node]:
            node = tree.left[node]
        else:
            node = tree.right[node]
    return float(tree.value[node])


def predict_rows(tree: RegressionTree, X: np.ndarray) -> np.ndarray:
    """Vectorized leaf routing for a feature matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != tree.n_features:
        raise ValueError(f"expected {tree.n_features} features, got {X.shape[1]}")
    idx = np.zeros(X.shape[0], dtype=np.int32)
    while True:
        sv = tree.split_var[idx]
        active = np.flatnonzero(sv >= 0)
        if active.size == 0:
            break
        nodes = idx[active]
        go_left = X[active, sv[active]] <= tree.threshold[nodes]
        idx[active] = np.where(go_left, tree.left[nodes], tree.right[nodes])
    return tree.value[idx]


def fit_forest(
    data: Dataset,
    n_trees: int,
    params: TreeParams,
    rng: RngStream,
    n_workers: int = 1,
) -> Forest:
    """Fit J bagged trees; tree j draws its bag and splits from sub-stream j."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    params.resolve_mtry(data.n_features)
    n = data.n_rows

    def build(j: int) -> RegressionTree:
        stream = rng.child(j)
        gen = stream.generator()
        bag = _bootstrap_from_generator(n, gen)
        key = _splitmix64(stream.stream_id ^ stream.master_seed)
        return _fit_tree_with_generator(data, bag, params, gen, key)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            trees = tuple(pool.map(build, range(n_trees)))
    else:
        trees = tuple(build(j) for j in range(n_trees))
    return Forest(
        trees=trees,
        params=params,
        seed=rng.master_seed,
        n_features=data.n_features,
        n_train_rows=n,
    )


def forest_mean_predict(forest: Forest, x: np.ndarray) -> float:
    """Arithmetic mean of all tree predictions at a single point."""
    if forest.n_trees == 0:
        raise ValueError("forest is empty")
    return float(np.mean([predict_tree(t, x) for t in forest.trees]))


def forest_mean_predict_rows(forest: Forest, X: np.ndarray) -> np.ndarray:
    preds = np.zeros(np.asarray(X).shape[0])
    for t in forest.trees:
        preds += predict_rows(t, X)
    return preds / forest.n_trees


def _in_bag_mask(forest: Forest, n_rows: int) -> np.ndarray:
    """(n_rows, J) boolean: row i appeared in tree j's bag."""
    mask = np.zeros((n_rows, forest.n_trees), dtype=bool)
    for j, t in enumerate(forest.trees):
        mask[np.bincount(t.in_bag, minlength=n_rows) > 0, j] = True
    return mask


def oob_predictions(forest: Forest, data: Dataset) -> tuple[np.ndarray, float]:
    """Per-row mean over trees whose bag excludes the row (NaN if none).

    Returns (values, coverage) where coverage is the fraction of rows with a
    nonempty out-of-bag tree set. ``data`` must be the forest's training data.
    """
    if data.n_rows != forest.n_train_rows:
        raise ValueError("data row count does not match the forest's training data")
    mat = prediction_matrix(forest, data, in_sample=True)
    counts = mat.oob_mask.sum(axis=1)
    with np.errstate(invalid="ignore"):
        sums = np.where(mat.oob_mask, mat.values, 0.0).sum(axis=1)
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    coverage = float(np.mean(counts > 0))
    return values, coverage


@dataclass(frozen=True)
class TreePredictionMatrix:
    """n x J per-tree predictions plus the out-of-bag indicator mask."""

    values: np.ndarray
    oob_mask: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != self.oob_mask.shape:
            raise ValueError("values and oob_mask shapes must agree")
        if not np.isfinite(self.values).all():
            raise ValueError("tree predictions must be finite")


def prediction_matrix(forest: Forest, data: Dataset, in_sample: bool = False) -> TreePredictionMatrix:
    """Evaluate every tree on every row.

    With ``in_sample=True`` the rows are the forest's training rows and the
    mask reflects each tree's bag; otherwise (cross-fitting or new data) every
    row is out-of-bag for every tree.
    """
    X = data.features
    values = np.empty((X.shape[0], forest.n_trees))
    for j, t in enumerate(forest.trees):
        values[:, j] = predict_rows(t, X)
    if in_sample:
        mask = ~_in_bag_mask(forest, data.n_rows)
    else:
        mask = np.ones_like(values, dtype=bool)
    return TreePredictionMatrix(values=values, oob_mask=mask)


def split_counts(forest: Forest) -> np.ndarray:
    """C[s, j] = number of internal nodes of tree j splitting on feature s."""
    counts = np.zeros((forest.n_features, forest.n_trees), dtype=np.int64)
    for j, t in enumerate(forest.trees):
        internal = t.split_var[t.split_var >= 0]
        if internal.size:
            counts[:, j] = np.bincount(internal, minlength=forest.n_features)
    return counts


def forest_to_json(forest: Forest) -> str:
    """Serialize to a versioned, byte-stable JSON document."""
    doc = {
        "format_version": FOREST_FORMAT_VERSION,
        "seed": forest.seed,
        "n_features": forest.n_features,
        "n_train_rows": forest.n_train_rows,
        "params": {
            "mtry": forest.params.mtry,
            "min_node_size": forest.params.min_node_size,
            "max_leaf_nodes": forest.params.max_leaf_nodes,
        },
        "trees": [
            {
                "split_var": t.split_var.tolist(),
                "threshold": [None if np.isnan(v) else v for v in t.threshold.tolist()],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
                "in_bag": t.in_bag.tolist(),
            }
            for t in forest.trees
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def forest_from_json(text: str) -> Forest:
    doc = json.loads(text)
    if doc.get("format_version") != FOREST_FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {doc.get('format_version')!r}")
    p = int(doc["n_features"])
    trees = tuple(
        RegressionTree(
            split_var=np.asarray(t["split_var"], dtype=np.int32),
            threshold=np.asarray(
                [np.nan if v is None else v for v in t["threshold"]], dtype=np.float64
            ),
            left=np.asarray(t["left"], dtype=np.int32),
            right=np.asarray(t["right"], dtype=np.int32),
            value=np.asarray(t["value"], dtype=np.float64),
            in_bag=np.asarray(t["in_bag"], dtype=np.int64),
            n_features=p,
        )
        for t in doc["trees"]
    )
    params = TreeParams(
        mtry=doc["params"]["mtry"],
        min_node_size=doc["params"]["min_node_size"],
        max_leaf_nodes=doc["params"]["max_leaf_nodes"],
    )
    return Forest(
        trees=trees,
        params=params,
        seed=int(doc["seed"]),
        n_features=p,
        n_train_rows=int(doc["n_train_rows"]),
    )
