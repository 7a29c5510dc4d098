import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedsurf.forest import (
    Forest,
    ForestParams,
    SurvivalTree,
    best_split,
    dumps_forest,
    fit_forest,
    fit_tree,
    loads_forest,
    log_rank_statistic,
    predict_chf,
    predict_risk,
    predict_survival,
)
from fedsurf.survival import chf_to_survival, nelson_aalen
from helpers import make_data, random_data


# -- log-rank -------------------------------------------------------------

def _logrank_oracle(t1, e1, t2, e2):
    """Plain loop over pooled event times."""
    t = np.concatenate([t1, t2])
    e = np.concatenate([e1, e2]).astype(bool)
    num = var = 0.0
    for s in np.unique(t[e]):
        n = np.sum(t >= s)
        d = np.sum(e & (t == s))
        n1 = np.sum(t1 >= s)
        d1 = np.sum(np.asarray(e1, bool) & (t1 == s))
        num += d1 - n1 * d / n
        if n > 1:
            var += (n1 / n) * (1 - n1 / n) * d * (n - d) / (n - 1)
    return abs(num) / math.sqrt(var) if var > 0 else 0.0


def test_log_rank_two_groups_hand_value():
    left = make_data([1, 2], [1, 1])
    right = make_data([10, 11], [1, 1])
    # O - E = 2 - (2/4 + 1/3) = 7/6, variance = 1/4 + 2/9 = 17/36
    expected = (7 / 6) / math.sqrt(17 / 36)
    assert log_rank_statistic(left, right) == pytest.approx(expected, rel=1e-12)
    assert log_rank_statistic(left, right) == pytest.approx(1.6977, abs=1e-4)


def test_log_rank_identical_groups_is_zero():
    a = make_data([1, 3, 5], [1, 0, 1])
    assert log_rank_statistic(a, a) == 0.0


def test_log_rank_invalid_cases():
    assert log_rank_statistic(make_data([1, 2], [0, 0]), make_data([3], [0])) is None
    assert log_rank_statistic(make_data([], []), make_data([3], [1])) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_log_rank_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = random_data(rng, int(rng.integers(3, 30)), 1, integer_times=True)
    b = random_data(rng, int(rng.integers(3, 30)), 1, integer_times=True)
    if not (a.event.any() or b.event.any()):
        return
    ours = log_rank_statistic(a, b)
    assert ours == pytest.approx(_logrank_oracle(a.time, a.event, b.time, b.event), abs=1e-10)
    if a.event.any() and b.event.any():
        res = stats.logrank(
            stats.CensoredData(uncensored=a.time[a.event], right=a.time[~a.event]),
            stats.CensoredData(uncensored=b.time[b.event], right=b.time[~b.event]),
        )
        assert ours == pytest.approx(abs(res.statistic), abs=1e-9)


# -- best_split -----------------------------------------------------------

def test_best_split_no_distinct_values():
    data = make_data([1, 2, 3, 4], [1, 1, 1, 1], np.ones((4, 2)))
    assert best_split(data, [0, 1], min_samples_leaf=1) is None


def test_best_split_single_threshold():
    data = make_data([1, 2, 10, 11], [1, 1, 1, 1], [[0], [0], [1], [1]])
    s = best_split(data, [0], min_samples_leaf=2)
    assert s.feature == 0 and s.threshold == 0.5


def test_best_split_prefers_separating_feature():
    X = np.column_stack([[0, 0, 0, 1, 1, 1], [5, 5, 5, 5, 5, 5]])
    data = make_data([1, 2, 3, 20, 21, 22], [1] * 6, X)
    s = best_split(data, [1, 0], min_samples_leaf=1)
    assert s.feature == 0 and s.threshold == 0.5


def _brute_split(data, features, min_leaf, min_ev):
    cands = []
    for f in features:
        x = data.X[:, f]
        ok = ~np.isnan(x)
        vals = np.unique(x[ok])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2
            L = ok & (x <= thr)
            R = ok & (x > thr)
            if L.sum() < min_leaf or R.sum() < min_leaf:
                continue
            if data.event[L].sum() < min_ev or data.event[R].sum() < min_ev:
                continue
            stat = _logrank_oracle(data.time[L], data.event[L], data.time[R], data.event[R])
            cands.append((stat, f, thr))
    return cands


@settings(max_examples=300, deadline=None)
@given(
    st.integers(4, 50), st.integers(1, 3), st.integers(1, 4), st.integers(1, 2),
    st.integers(0, 2**32 - 1), st.booleans(),
)
def test_best_split_matches_brute_force(n, d, min_leaf, min_ev, seed, discrete):
    rng = np.random.default_rng(seed)
    data = random_data(rng, n, d, integer_times=True)
    if discrete:
        data = make_data(data.time, data.event, np.round(data.X))
    if rng.random() < 0.3:
        X = data.X.copy()
        X[rng.random(X.shape) < 0.1] = np.nan
        data = make_data(data.time, data.event, X)
    feats = list(range(d))
    got = best_split(data, feats, min_leaf, min_ev)
    cands = _brute_split(data, feats, min_leaf, min_ev)
    if not cands:
        assert got is None
        return
    best = max(c[0] for c in cands)
    assert got is not None
    assert got.statistic == pytest.approx(best, abs=1e-9)
    # ties (equal up to rounding) go to the lowest feature, then the lowest threshold
    near = [(f, thr) for s, f, thr in cands if s >= best - 1e-9]
    assert (got.feature, got.threshold) == min(near)


def test_best_split_row_order_invariant(rng):
    data = random_data(rng, 40, 3, integer_times=True)
    data = make_data(data.time, data.event, np.round(data.X, 1))
    a = best_split(data, [0, 1, 2], 3)
    for _ in range(10):
        b = best_split(data.subset(rng.permutation(40)), [0, 1, 2], 3)
        assert a == b


# -- fit_tree -------------------------------------------------------------

def test_depth_zero_tree_is_bootstrap_nelson_aalen(rng):
    data = random_data(rng, 30, 2, integer_times=True)
    tree = fit_tree(data, ForestParams(max_depth=0), np.random.default_rng(3))
    assert tree.n_leaves == 1
    H = nelson_aalen(data.subset(tree.bootstrap))
    np.testing.assert_array_equal(tree.chf[0], H(tree.time_grid))
    assert len(tree.bootstrap) == len(data)


def test_all_censored_tree_is_flat(rng):
    data = make_data(rng.exponential(size=30), np.zeros(30), rng.normal(size=(30, 2)))
    tree = fit_tree(data, ForestParams(), np.random.default_rng(0), time_grid=[1.0, 2.0])
    assert tree.n_leaves == 1
    np.testing.assert_array_equal(tree.chf, 0.0)


def test_depth_one_tree_traced_leaves():
    data = make_data([1, 2, 10, 11], [1, 1, 1, 1], [[0], [0], [1], [1]])
    params = ForestParams(max_depth=1, min_samples_split=2, min_samples_leaf=1, max_features=1)
    for seed in range(50):
        tree = fit_tree(data, params, np.random.default_rng(seed))
        boot = tree.bootstrap
        if 0 < np.sum(boot < 2) < 4:
            break
    assert tree.n_nodes == 3 and tree.threshold[0] == 0.5
    left = data.subset(boot[boot < 2])
    right = data.subset(boot[boot >= 2])
    np.testing.assert_array_equal(tree.chf[tree.leaf_index[tree.left[0]]],
                                  nelson_aalen(left)(tree.time_grid))
    np.testing.assert_array_equal(tree.chf[tree.leaf_index[tree.right[0]]],
                                  nelson_aalen(right)(tree.time_grid))


def test_leaf_hazards_equal_routed_in_bag_estimates(rng):
    data = random_data(rng, 120, 4, integer_times=True)
    X = data.X.copy()
    X[rng.random(X.shape) < 0.1] = np.nan
    data = make_data(data.time, data.event, X)
    forest = fit_forest(data, ForestParams(n_trees=10, seed=4))
    for tree in forest.trees:
        inbag = data.subset(tree.bootstrap)
        leaf = tree.apply(inbag.X)
        for node in np.unique(leaf):
            group = inbag.subset(np.nonzero(leaf == node)[0])
            stored = tree.chf[tree.leaf_index[node]]
            np.testing.assert_array_equal(stored, nelson_aalen(group)(tree.time_grid))
            assert tree.leaf_function(node).is_cumulative_hazard()
        # every leaf holds at least min_samples_leaf rows of in-bag data
        assert np.bincount(leaf).max() >= 1


def test_bootstrap_distinct_fraction(rng):
    data = random_data(rng, 200, 2)
    forest = fit_forest(data, ForestParams(n_trees=60, max_depth=0))
    frac = np.mean([t.in_bag_count / len(data) for t in forest.trees])
    assert abs(frac - (1 - math.exp(-1))) < 0.05


# -- forest ---------------------------------------------------------------

def test_forest_size_and_determinism(rng):
    data = random_data(rng, 80, 3)
    a = fit_forest(data, ForestParams(n_trees=7, seed=9))
    b = fit_forest(data, ForestParams(n_trees=7, seed=9))
    c = fit_forest(data, ForestParams(n_trees=7, seed=9), n_jobs=2)
    assert len(a) == 7
    assert dumps_forest(a) == dumps_forest(b) == dumps_forest(c)
    assert dumps_forest(a) != dumps_forest(fit_forest(data, ForestParams(n_trees=7, seed=10)))


class _PermutedStream:
    """Generator whose bootstrap draws are re-indexed and shuffled."""

    def __init__(self, seed, inverse):
        self.g = np.random.default_rng(seed)
        self.shuffle = np.random.default_rng(seed + 1)
        self.inverse = inverse
        self.original = None

    def integers(self, low, high, size):
        boot = self.g.integers(low, high, size=size)
        self.original = boot
        return self.shuffle.permutation(self.inverse[boot])

    def choice(self, *args, **kwargs):
        return self.g.choice(*args, **kwargs)


def test_tree_invariant_to_row_order(rng):
    data = random_data(rng, 90, 3, integer_times=True)
    data = make_data(data.time, data.event, np.round(data.X, 1))
    params = ForestParams(min_samples_split=4, min_samples_leaf=2)
    for seed in range(5):
        perm = rng.permutation(len(data))
        inverse = np.argsort(perm)
        ref = fit_tree(data, params, np.random.default_rng(seed))
        moved = fit_tree(data.subset(perm), params, _PermutedStream(seed, inverse),
                         time_grid=ref.time_grid)
        assert moved.to_dict() == ref.to_dict()


def test_single_tree_forest_matches_tree(rng):
    data = random_data(rng, 60, 2)
    forest = fit_forest(data, ForestParams(n_trees=1))
    np.testing.assert_array_equal(forest.chf(data.X), forest.trees[0].predict_chf(data.X))


def test_ensemble_is_mean_of_tree_hazards(rng):
    data = random_data(rng, 100, 3)
    forest = fit_forest(data, ForestParams(n_trees=12, seed=1))
    per_tree = np.stack([t.predict_chf(data.X) for t in forest.trees])
    np.testing.assert_allclose(forest.chf(data.X), per_tree.mean(axis=0), rtol=1e-14, atol=0)
    H = predict_chf(forest, data.X[0])
    np.testing.assert_allclose(H.values, per_tree[:, 0].mean(axis=0), rtol=1e-14, atol=0)


def _leaf(values, grid, d=1):
    return SurvivalTree.from_dict({"nodes": [{"chf": list(values)}]}, grid, d)


def test_two_leaf_trees_average():
    f = Forest([_leaf([0.2, 0.4], [1, 2]), _leaf([0.6, 1.0], [1, 2])])
    np.testing.assert_allclose(predict_chf(f, [0.0]).values, [0.4, 0.7])
    same = Forest([_leaf([0.2, 0.4], [1, 2])] * 3)
    np.testing.assert_allclose(predict_chf(same, [0.0]).values, [0.2, 0.4])


def test_mixed_grids_use_right_continuous_lookup():
    f = Forest([_leaf([0.2, 0.4], [1, 3]), _leaf([0.6], [2])])
    np.testing.assert_array_equal(f.time_grid, [1, 2, 3])
    np.testing.assert_allclose(f.chf([[0.0]])[0], [0.1, 0.4, 0.5])


def test_risk_examples():
    assert predict_risk(Forest([_leaf([0.5, 1.0], [1, 2])]), [0.0]) == 1.5
    assert predict_risk(Forest([_leaf([0.0, 0.0], [1, 2])]), [0.0]) == 0.0
    a = predict_risk(Forest([_leaf([0.5, 1.0], [1, 2])]), [0.0])
    b = predict_risk(Forest([_leaf([0.5, 0.9], [1, 2])]), [0.0])
    assert a > b


def test_survival_prediction(rng):
    f = Forest([_leaf([0.1, math.log(4)], [1, 2])])
    assert predict_survival(f, [0.0])(2) == pytest.approx(0.25)
    assert predict_survival(Forest([_leaf([0, 0], [1, 2])]), [0.0])(5) == 1.0
    data = random_data(rng, 60, 2)
    forest = fit_forest(data, ForestParams(n_trees=5))
    for x in data.X[:5]:
        assert predict_survival(forest, x) == chf_to_survival(predict_chf(forest, x))


def test_dimension_mismatch(rng):
    forest = fit_forest(random_data(rng, 40, 2), ForestParams(n_trees=2))
    with pytest.raises(ValueError):
        predict_chf(forest, [1.0, 2.0, 3.0])


def test_missing_value_follows_stored_direction(rng):
    data = random_data(rng, 150, 2)
    X = data.X.copy()
    X[rng.random(150) < 0.2, 0] = np.nan
    data = make_data(data.time, data.event, X)
    params = ForestParams(n_trees=10, max_features=2, max_depth=1, seed=2)
    forest = fit_forest(data, params)
    for tree in forest.trees:
        if tree.feature[0] < 0:
            continue
        f, thr = tree.feature[0], tree.threshold[0]
        x = np.array([np.nan, np.nan])
        x[1 - f] = 0.0
        filled = x.copy()
        filled[f] = thr - 1 if tree.missing_left[0] else thr + 1
        np.testing.assert_array_equal(tree.predict_chf(x), tree.predict_chf(filled))
        # direction is the child that took more in-bag rows
        inbag = data.X[tree.bootstrap, f]
        ok = ~np.isnan(inbag)
        assert tree.missing_left[0] == (np.sum(inbag[ok] <= thr) >= np.sum(inbag[ok] > thr))


def test_serialization_round_trip(rng):
    data = random_data(rng, 80, 3)
    forest = fit_forest(data, ForestParams(n_trees=5, seed=5))
    text = dumps_forest(forest)
    back = loads_forest(text)
    assert dumps_forest(back) == text
    np.testing.assert_array_equal(back.chf(data.X), forest.chf(data.X))
    assert back.n_features == 3


def test_params_validation():
    with pytest.raises(ValueError):
        ForestParams(n_trees=0)
    with pytest.raises(ValueError):
        ForestParams(min_samples_leaf=20, min_samples_split=10)
    with pytest.raises(ValueError):
        ForestParams(max_features=5).features_per_node(3)
    assert ForestParams().features_per_node(8) == 3
