"""Random survival forests with log-rank splitting.

Trees are grown on bootstrap samples.  At every node a random subset of
features is scanned exhaustively (midpoints between consecutive distinct
values) and the split maximizing the two-sample log-rank statistic wins.
Leaves store the Nelson-Aalen cumulative hazard of their in-bag samples on
the forest time grid; the ensemble prediction is the mean leaf hazard.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .survival import StepFunction, SurvivalDataset, event_table

__all__ = [
    "ForestParams",
    "Split",
    "SurvivalTree",
    "Forest",
    "log_rank_statistic",
    "best_split",
    "fit_tree",
    "fit_forest",
    "predict_chf",
    "predict_risk",
    "predict_survival",
    "forest_to_dict",
    "forest_from_dict",
    "dumps_forest",
    "loads_forest",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    """Tree-building parameters.

    ``max_features=None`` resolves to ``ceil(sqrt(d))`` at fit time and
    ``max_depth=None`` grows trees until the sample-size limits stop them.
    """

    n_trees: int = 100
    max_features: int | None = None
    max_depth: int | None = None
    min_samples_split: int = 10
    min_samples_leaf: int = 5
    min_events_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.min_samples_leaf < 1 or self.min_samples_split < 1 or self.min_events_leaf < 0:
            raise ValueError("sample limits must be positive")
        if self.min_samples_leaf > self.min_samples_split:
            raise ValueError("min_samples_leaf must not exceed min_samples_split")

    def features_per_node(self, d: int) -> int:
        m = self.max_features if self.max_features is not None else math.ceil(math.sqrt(d))
        if m > d:
            raise ValueError(f"max_features={m} exceeds the {d} available features")
        return m


class Split(NamedTuple):
    feature: int
    threshold: float
    statistic: float


def _risk_matrices(time, event):
    """At-risk and event indicators of each row at the distinct event times."""
    times = np.unique(time[event])
    Y = time[:, None] >= times[None, :]
    D = event[:, None] & (time[:, None] == times[None, :])
    return Y, D


def _logrank_prefix(Y, D):
    """Log-rank statistic of every prefix split of the rows of ``Y``/``D``.

    Row ``k`` of the result is the statistic for left = first ``k + 1`` rows.
    Counts are accumulated as integers so the result depends only on which
    rows fall left, not on their order.
    """
    n1 = np.cumsum(Y, axis=0, dtype=np.int64)[:-1]
    d1 = np.cumsum(D, axis=0, dtype=np.int64)[:-1]
    nj = Y.sum(0).astype(float)
    dj = D.sum(0).astype(float)
    num = (d1 - n1 * (dj / nj)).sum(axis=1)
    frac = n1 / nj
    scale = np.where(nj > 1, dj * (nj - dj) / np.maximum(nj - 1.0, 1.0), 0.0)
    var = (frac * (1.0 - frac) * scale).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(var > 0, np.abs(num) / np.sqrt(var), 0.0)
    return stat


def log_rank_statistic(left: SurvivalDataset, right: SurvivalDataset) -> float | None:
    """Two-sample log-rank statistic (absolute standardized O - E).

    Returns ``None`` when either group is empty or the pooled sample has no
    events, i.e. the candidate split is invalid.
    """
    if len(left) == 0 or len(right) == 0:
        return None
    time = np.concatenate([left.time, right.time])
    event = np.concatenate([left.event, right.event])
    if not event.any():
        return None
    Y, D = _risk_matrices(time, event)
    return float(_logrank_prefix(Y, D)[len(left) - 1])


def _tie_tol(stat):
    # mirrored partitions give equal statistics up to rounding; treat as ties
    return 1e-12 * max(1.0, abs(stat))


def _scan_feature(x, time, event, min_samples_leaf, min_events_leaf):
    """Best threshold on one feature; missing rows are ignored.

    Returns ``(statistic, threshold, n_left, n_right)`` or ``None``.
    """
    ok = ~np.isnan(x)
    x, time, event = x[ok], time[ok], event[ok]
    n = len(x)
    if n < 2 or not event.any():
        return None
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cut = np.nonzero(xs[1:] > xs[:-1])[0]  # left = rows 0..cut
    if len(cut) == 0:
        return None
    n_left = cut + 1
    ev_left = np.cumsum(event[order], dtype=np.int64)[cut]
    ev_total = int(event.sum())
    valid = (
        (n_left >= min_samples_leaf)
        & (n - n_left >= min_samples_leaf)
        & (ev_left >= min_events_leaf)
        & (ev_total - ev_left >= min_events_leaf)
    )
    if not valid.any():
        return None
    Y, D = _risk_matrices(time[order], event[order])
    stat = _logrank_prefix(Y, D)[cut]
    stat = np.where(valid, stat, -np.inf)
    top = stat.max()
    k = int(np.argmax(stat >= top - _tie_tol(top)))  # first maximum = lowest threshold
    c = cut[k]
    return float(stat[k]), float((xs[c] + xs[c + 1]) / 2.0), int(n_left[k]), int(n - n_left[k])


def best_split(
    node_data: SurvivalDataset,
    candidate_features: Sequence[int],
    min_samples_leaf: int = 5,
    min_events_leaf: int = 1,
) -> Split | None:
    """Exhaustive log-rank split search over ``candidate_features``.

    Ties go to the lowest feature index, then the lowest threshold.  Size
    and event limits apply to the non-missing rows of the split feature.
    """
    found = _best_split_arrays(
        node_data.X, node_data.time, node_data.event, candidate_features,
        min_samples_leaf, min_events_leaf,
    )
    return None if found is None else found[0]


def _best_split_arrays(X, time, event, features, min_samples_leaf, min_events_leaf):
    best = None
    for f in sorted(int(f) for f in features):
        if not 0 <= f < X.shape[1]:
            raise ValueError(f"feature index {f} out of range")
        res = _scan_feature(X[:, f], time, event, min_samples_leaf, min_events_leaf)
        if res is None:
            continue
        stat, thr, n_l, n_r = res
        if best is None or stat > best[0].statistic + _tie_tol(best[0].statistic):
            best = (Split(f, thr, stat), n_l >= n_r)
    return best


@dataclass(frozen=True, eq=False)
class SurvivalTree:
    """Binary survival tree stored as flat node arrays.

    Internal nodes have ``feature >= 0``; ``x <= threshold`` goes left and a
    missing value follows ``missing_left``.  Leaf ``i`` owns row
    ``leaf_index[i]`` of ``chf``, its cumulative hazard on ``time_grid``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_index: np.ndarray
    chf: np.ndarray
    time_grid: np.ndarray
    n_features: int
    bootstrap: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return self.chf.shape[0]

    @property
    def in_bag_count(self) -> int:
        return 0 if self.bootstrap is None else len(np.unique(self.bootstrap))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X) -> np.ndarray:
        """Index of the leaf node reached by each row of ``X``."""
        X = _as_matrix(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = np.nonzero(feat >= 0)[0]
            if len(active) == 0:
                return node
            cur = node[active]
            x = X[active, feat[active]]
            go_left = np.where(np.isnan(x), self.missing_left[cur], x <= self.threshold[cur])
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def predict_chf(self, X) -> np.ndarray:
        """Leaf cumulative hazards on ``time_grid``, shape (n, len(time_grid))."""
        return self.chf[self.leaf_index[self.apply(X)]]

    def chf_at(self, X, times) -> np.ndarray:
        return _regrid(self.predict_chf(X), self.time_grid, np.asarray(times, dtype=float))

    def survival_at(self, X, times) -> np.ndarray:
        return np.exp(-self.chf_at(X, times))

    def leaf_function(self, node: int) -> StepFunction:
        return StepFunction(self.time_grid, self.chf[self.leaf_index[node]], 0.0)

    def to_dict(self, time_grid=None) -> dict:
        """Node array with leaf hazards expressed on ``time_grid``."""
        chf = self.chf
        if time_grid is not None:
            chf = _regrid(self.chf, self.time_grid, np.asarray(time_grid, dtype=float))
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "missing": "left" if self.missing_left[i] else "right",
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                })
            else:
                nodes.append({"chf": chf[self.leaf_index[i]].tolist()})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, spec: dict, time_grid, n_features: int) -> "SurvivalTree":
        nodes = spec["nodes"]
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        missing_left = np.zeros(n, dtype=bool)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        leaf_index = np.full(n, -1, dtype=np.int64)
        rows = []
        for i, node in enumerate(nodes):
            if "chf" in node:
                leaf_index[i] = len(rows)
                rows.append(node["chf"])
            else:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                missing_left[i] = node["missing"] == "left"
                left[i], right[i] = node["left"], node["right"]
        grid = np.asarray(time_grid, dtype=float)
        chf = np.array(rows, dtype=float).reshape(len(rows), len(grid))
        return cls(feature, threshold, missing_left, left, right, leaf_index, chf, grid, n_features)


def _regrid(values, grid, new_grid):
    """Re-express step-function rows given on ``grid`` at ``new_grid`` points."""
    if np.array_equal(grid, new_grid):
        return values
    idx = np.searchsorted(grid, new_grid, side="right")
    padded = np.concatenate([np.zeros((values.shape[0], 1)), values], axis=1)
    return padded[:, idx]


def _as_matrix(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != d:
        raise ValueError(f"expected {d} features, got {X.shape[1]}")
    return X


def _leaf_chf(time, event, grid):
    times, d, n = event_table(time, event)
    H = StepFunction(times, np.cumsum(d / n), 0.0)
    return H(grid)


def fit_tree(
    data: SurvivalDataset,
    params: ForestParams,
    rng: np.random.Generator,
    time_grid=None,
) -> SurvivalTree:
    """Grow one survival tree on a bootstrap sample of ``data``.

    ``time_grid`` defaults to the distinct event times of ``data``.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    if time_grid is None:
        time_grid = np.unique(data.time[data.event])
    grid = np.asarray(time_grid, dtype=float)
    n_feat = params.features_per_node(data.n_features)
    boot = rng.integers(0, len(data), size=len(data))
    X, T, E = data.X[boot], data.time[boot], data.event[boot]

    feature, threshold, missing_left, left, right, leaf_index = [], [], [], [], [], []
    leaves = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        missing_left.append(False)
        left.append(-1)
        right.append(-1)
        leaf_index.append(-1)
        return len(feature) - 1

    stack = [(new_node(), np.arange(len(boot)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        found = None
        can_split = (
            (params.max_depth is None or depth < params.max_depth)
            and len(rows) >= params.min_samples_split
            and E[rows].any()
        )
        if can_split:
            cands = rng.choice(data.n_features, size=n_feat, replace=False)
            found = _best_split_arrays(
                X[rows], T[rows], E[rows], cands,
                params.min_samples_leaf, params.min_events_leaf,
            )
        if found is None:
            leaf_index[node] = len(leaves)
            leaves.append(_leaf_chf(T[rows], E[rows], grid))
            continue
        split, miss_left = found
        x = X[rows, split.feature]
        go_left = np.where(np.isnan(x), miss_left, x <= split.threshold)
        feature[node] = split.feature
        threshold[node] = split.threshold
        missing_left[node] = miss_left
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], rows[~go_left], depth + 1))
        stack.append((left[node], rows[go_left], depth + 1))

    return SurvivalTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        missing_left=np.array(missing_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_index=np.array(leaf_index, dtype=np.int64),
        chf=np.array(leaves, dtype=float).reshape(len(leaves), len(grid)),
        time_grid=grid,
        n_features=data.n_features,
        bootstrap=boot,
    )


class Forest:
    """Ensemble of survival trees, possibly grown on different time grids.

    Predictions are given on ``time_grid``, the union of the tree grids;
    each tree hazard is read off by right-continuous lookup.
    """

    def __init__(self, trees: Sequence[SurvivalTree], n_features: int | None = None):
        trees = tuple(trees)
        if not trees:
            raise ValueError("a forest needs at least one tree")
        d = trees[0].n_features if n_features is None else n_features
        if any(t.n_features != d for t in trees):
            raise ValueError("trees disagree on the number of features")
        self.trees = trees
        self.n_features = d
        grids = {id(t.time_grid): t.time_grid for t in trees}
        self.time_grid = np.unique(np.concatenate(list(grids.values())))
        self._lookup = {
            k: np.searchsorted(g, self.time_grid, side="right") for k, g in grids.items()
        }

    def __len__(self) -> int:
        return len(self.trees)

    def _tree_chf(self, tree, X):
        vals = tree.predict_chf(X)
        idx = self._lookup[id(tree.time_grid)]
        return np.concatenate([np.zeros((len(vals), 1)), vals], axis=1)[:, idx]

    def tree_chfs(self, X) -> np.ndarray:
        """Per-tree hazards on ``time_grid``, shape (n_trees, n, len(time_grid))."""
        X = _as_matrix(X, self.n_features)
        return np.stack([self._tree_chf(t, X) for t in self.trees])

    def chf(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        total = np.zeros((len(X), len(self.time_grid)))
        for t in self.trees:
            total += self._tree_chf(t, X)
        return total / len(self.trees)

    def survival(self, X) -> np.ndarray:
        return np.exp(-self.chf(X))

    def risk(self, X) -> np.ndarray:
        """Scalar risk: ensemble hazard summed over ``time_grid``."""
        return self.chf(X).sum(axis=1)

    def chf_at(self, X, times) -> np.ndarray:
        H = self.chf(X)
        idx = np.searchsorted(self.time_grid, np.asarray(times, dtype=float), side="right")
        return np.concatenate([np.zeros((len(H), 1)), H], axis=1)[:, idx]

    def survival_at(self, X, times) -> np.ndarray:
        return np.exp(-self.chf_at(X, times))


def _fit_chunk(data, params, grid, indices):
    return [fit_tree(data, params, np.random.default_rng([params.seed, i]), grid) for i in indices]


def fit_forest(data: SurvivalDataset, params: ForestParams, n_jobs: int = 1) -> Forest:
    """Fit ``params.n_trees`` trees; tree ``i`` uses the stream ``(seed, i)``.

    The result does not depend on ``n_jobs``.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a forest on an empty dataset")
    params.features_per_node(data.n_features)
    grid = np.unique(data.time[data.event])
    if n_jobs <= 1:
        trees = _fit_chunk(data, params, grid, range(params.n_trees))
    else:
        chunks = [list(range(params.n_trees))[k::n_jobs] for k in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(_fit_chunk, *zip(*[(data, params, grid, c) for c in chunks])))
        by_index = {i: t for c, p in zip(chunks, parts) for i, t in zip(c, p)}
        trees = [by_index[i] for i in range(params.n_trees)]
        # share one grid object so the forest caches a single lookup
        trees = [_with_grid(t, grid) for t in trees]
    return Forest(trees, data.n_features)


def _with_grid(tree, grid):
    return SurvivalTree(tree.feature, tree.threshold, tree.missing_left, tree.left, tree.right,
                        tree.leaf_index, tree.chf, grid, tree.n_features, tree.bootstrap)


def predict_chf(forest: Forest, x) -> StepFunction:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_chf expects a single feature vector")
    return StepFunction(forest.time_grid, forest.chf(x)[0], 0.0)


def predict_risk(forest: Forest, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_risk expects a single feature vector")
    return float(forest.risk(x)[0])


def predict_survival(forest: Forest, x) -> StepFunction:
    H = predict_chf(forest, x)
    return StepFunction(H.times, np.exp(-H.values), 1.0)


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format": "fedsurf-forest",
        "version": FORMAT_VERSION,
        "feature_count": forest.n_features,
        "time_grid": forest.time_grid.tolist(),
        "trees": [t.to_dict(forest.time_grid) for t in forest.trees],
    }


def forest_from_dict(spec: dict) -> Forest:
    if spec.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {spec.get('version')!r}")
    grid = np.asarray(spec["time_grid"], dtype=float)
    d = int(spec["feature_count"])
    return Forest([SurvivalTree.from_dict(t, grid, d) for t in spec["trees"]], d)


def dumps_forest(forest: Forest) -> str:
    return json.dumps(forest_to_dict(forest), separators=(",", ":"))


def loads_forest(text: str) -> Forest:
    return forest_from_dict(json.loads(text))
