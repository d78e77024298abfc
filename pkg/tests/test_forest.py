import dataclasses
from itertools import combinations

import numpy as np
import pytest
import scipy.sparse as sp

from mcfpolicy.dataset import SyntheticConfig, generate_synthetic
from mcfpolicy.exceptions import ConfigError, DataError
from mcfpolicy.forest import (ForestConfig, ForestModel, Tree, WeightMatrix, build_forest,
                              compute_weights, feature_deselect, predict_potential,
                              split_score, tune_m_try, weight_diagnostics)


def _oracle_score(arms, y, left, lam, effect_weight=1.0, use_mse=True):
    """Loop-based evaluation of the documented split formula."""
    arms, y, left = np.asarray(arms), np.asarray(y, float), np.asarray(left, bool)
    n = len(y)

    def means(m):
        return [y[m & (arms == d)].mean() for d in range(4)]

    def tau(mu):
        return [mu[e] - mu[d] for d, e in combinations(range(4), 2)]

    def shares(m):
        return [np.sum(m & (arms == d)) / m.sum() for d in range(4)]

    def sse(m):
        return sum(((y[m & (arms == d)] - y[m & (arms == d)].mean()) ** 2).sum() for d in range(4))

    parent = np.ones(n, bool)
    tp, sp_ = tau(means(parent)), shares(parent)
    H = P = 0.0
    for child in (left, ~left):
        w = child.sum() / n
        H += w * sum((a - b) ** 2 for a, b in zip(tau(means(child)), tp))
        P += w * sum((a - b) ** 2 for a, b in zip(shares(child), sp_))
    G = (sse(parent) - sse(left) - sse(~left)) / n if use_mse else 0.0
    return -(effect_weight * H + G) - lam * P


def _stats(arms, y, mask):
    arms, y = np.asarray(arms), np.asarray(y, float)
    c = np.array([np.sum(mask & (arms == d)) for d in range(4)], float)
    s = np.array([y[mask & (arms == d)].sum() for d in range(4)])
    q = np.array([(y[mask & (arms == d)] ** 2).sum() for d in range(4)])
    return c, s, q


def _score(arms, y, left, lam, effect_weight=1.0, use_mse=True):
    parent = np.ones(len(y), bool)
    cl, sl, ql = _stats(arms, y, np.asarray(left, bool))
    cp, spp, qp = _stats(arms, y, parent)
    if use_mse:
        return split_score(cl, sl, cp, spp, lam, ql, qp, effect_weight=effect_weight)
    return split_score(cl, sl, cp, spp, lam, effect_weight=effect_weight)


# ---------------------------------------------------------------------------
# split score

EIGHT_ARMS = [0, 1, 2, 3, 0, 1, 2, 3]
EIGHT_Y = [1, 2, 4, 7, 3, 2, 6, 5]


def test_eight_unit_node_hand_computation():
    # split A: units 0-3 left; split B: units 0, 2, 5, 7 left
    # parent arm means 2, 2, 5, 6; contrast shifts sum to 11 (A) and 3 (B);
    # within-arm SSE drops from 6 to 0 in both, i.e. 6 / 8 per unit
    split_a = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    split_b = np.array([1, 0, 1, 0, 0, 1, 0, 1], bool)
    assert _score(EIGHT_ARMS, EIGHT_Y, split_a, lam=1.0) == pytest.approx(-11.75, abs=1e-12)
    assert _score(EIGHT_ARMS, EIGHT_Y, split_b, lam=1.0) == pytest.approx(-3.75, abs=1e-12)
    assert _score(EIGHT_ARMS, EIGHT_Y, split_a, 1.0, effect_weight=0.0) == pytest.approx(-0.75)
    assert _score(EIGHT_ARMS, EIGHT_Y, split_a, 1.0, use_mse=False) == pytest.approx(-11.0)
    for split in (split_a, split_b):
        assert _score(EIGHT_ARMS, EIGHT_Y, split, 2.5) == pytest.approx(
            _oracle_score(EIGHT_ARMS, EIGHT_Y, split, 2.5), abs=1e-12)


def test_identical_child_shares_have_no_penalty():
    split = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    a = _score(EIGHT_ARMS, EIGHT_Y, split, lam=0.0)
    b = _score(EIGHT_ARMS, EIGHT_Y, split, lam=1e6)
    assert a == b


def test_imbalance_penalty_hand_computation():
    # parent 3 units per arm; left child counts (2, 1, 1, 1), right (1, 2, 2, 2)
    arms = np.array([0, 0, 1, 2, 3, 0, 1, 1, 2, 2, 3, 3])
    left = np.arange(12) < 5
    y = np.zeros(12)
    expected = 5 / 12 * 0.03 + 7 / 12 * 3 / 196
    assert _score(arms, y, left, lam=2.0) == pytest.approx(-2 * expected, abs=1e-14)


def test_score_matches_oracle_on_random_nodes(rng):
    for _ in range(50):
        arms = np.repeat(np.arange(4), 6)
        rng.shuffle(arms)
        y = rng.normal(size=24)
        left = np.zeros(24, bool)
        for d in range(4):
            idx = np.flatnonzero(arms == d)
            left[rng.choice(idx, size=rng.integers(1, 6), replace=False)] = True
        lam, ew = rng.uniform(0, 3), rng.uniform(0, 2)
        assert _score(arms, y, left, lam, ew) == pytest.approx(
            _oracle_score(arms, y, left, lam, ew), abs=1e-10)


def test_zero_penalty_ranks_like_pure_effect_criterion(rng):
    arms = np.repeat(np.arange(4), 8)
    y = rng.normal(size=32)
    splits = []
    for _ in range(30):
        left = np.zeros(32, bool)
        for d in range(4):
            idx = np.flatnonzero(arms == d)
            left[rng.choice(idx, size=rng.integers(1, 8), replace=False)] = True
        splits.append(left)
    ours = [_score(arms, y, s, 0.0, use_mse=False) for s in splits]
    pure = [_oracle_score(arms, y, s, 0.0, use_mse=False) for s in splits]
    assert np.array_equal(np.argsort(ours, kind="stable"), np.argsort(pure, kind="stable"))


# ---------------------------------------------------------------------------
# hand-built trees and weights

def _manual_forest(trees, X, treatment):
    X = np.asarray(X, float)
    return ForestModel(ForestConfig(n_trees=len(trees)), trees, X, np.asarray(treatment),
                       np.zeros(len(X)), ["x"], np.array([False]), 0, 0.0)


def _leaf_tree(n):
    idx = np.arange(n)
    return Tree(np.array([-1]), np.array([np.nan]), np.array([-1]), np.array([-1]),
                np.zeros((1, 0), bool), idx, idx, np.zeros(n, np.int64))


def test_uniform_weight_within_leaf():
    treatment = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    forest = _manual_forest([_leaf_tree(8)], np.zeros((8, 1)), treatment)
    w = compute_weights(forest)
    row = w.arm(1)[0].toarray().ravel()
    assert np.array_equal(row, [0, 0, 0.5, 0.5, 0, 0, 0, 0])
    assert w.supported.all()


def test_unsupported_cell_is_flagged():
    # root splits on x <= 0.5; the left leaf has no arm-3 honest unit
    X = np.array([[0.], [0.], [0.], [1.], [1.], [1.], [1.]])
    treatment = np.array([0, 1, 2, 0, 1, 2, 3])
    tree = Tree(np.array([0, -1, -1]), np.array([0.5, np.nan, np.nan]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.zeros((3, 0), bool), np.arange(7), np.arange(7),
                np.array([1, 1, 1, 2, 2, 2, 2]))
    w = compute_weights(_manual_forest([tree], X, treatment))
    assert not w.supported[:3, 3].any()
    assert w.supported[3:].all()
    pot = w.potential(np.arange(7.0))
    assert np.isnan(pot[0, 3]) and pot[4, 3] == 6.0


def test_degenerate_single_leaf_forest_gives_arm_mean_differences(small_data):
    n = small_data.n
    forest = build_forest(small_data, ForestConfig(n_trees=1, min_leaf=n, seed=4))
    tree = forest.trees[0]
    assert tree.n_leaves == 1
    y = small_data.outcome("emp_0_30")
    pot = compute_weights(forest).potential(y)
    h = tree.honest
    means = np.array([y[h][small_data.treatment[h] == d].mean() for d in range(4)])
    assert np.allclose(pot, means[None, :], rtol=0, atol=1e-12)
    iate = pot[:, 2] - pot[:, 0]
    assert np.allclose(iate, means[2] - means[0], rtol=0, atol=1e-12)


def test_two_identical_trees_equal_one(small_forest):
    one = dataclasses.replace(small_forest, trees=small_forest.trees[:1])
    two = dataclasses.replace(small_forest, trees=[small_forest.trees[0]] * 2)
    w1, w2 = compute_weights(one), compute_weights(two)
    for d in range(4):
        assert abs(w1.arm(d) - w2.arm(d)).max() < 1e-15
    assert np.array_equal(w1.supported, w2.supported)


def test_weights_normalized_and_nonnegative(small_weights):
    sums = small_weights.row_sums()
    assert np.all(np.abs(sums[small_weights.supported] - 1) < 1e-10)
    for d in range(4):
        assert small_weights.arm(d).data.min() >= 0
        cols = small_weights.arm(d).indices
        assert np.all(small_weights.treatment[cols] == d)


def test_predict_potential_matches_weights(small_forest, small_weights, small_data):
    y = small_data.outcome("ue_0_30")
    assert np.allclose(predict_potential(small_forest, y), small_weights.potential(y),
                       atol=1e-10, equal_nan=True)


# ---------------------------------------------------------------------------
# forest construction

def test_same_seed_same_trees(small_data):
    cfg = ForestConfig(n_trees=5, seed=11)
    a, b = build_forest(small_data, cfg), build_forest(small_data, cfg)
    for ta, tb in zip(a.trees, b.trees):
        assert ta.to_dict() == tb.to_dict()


def test_worker_count_does_not_change_forest(small_data):
    a = build_forest(small_data, ForestConfig(n_trees=4, seed=2, workers=1))
    b = build_forest(small_data, ForestConfig(n_trees=4, seed=2, workers=2))
    assert [t.to_dict() for t in a.trees] == [t.to_dict() for t in b.trees]


def test_honesty_and_leaf_sizes(small_forest, small_data):
    cfg = small_forest.config
    arms = small_data.treatment
    for tree in small_forest.trees:
        assert np.isin(tree.honest, tree.subsample).all()
        building = np.setdiff1d(tree.subsample, tree.honest)
        # honest half is stratified by arm
        for d in range(4):
            nb, nh = np.sum(arms[building] == d), np.sum(arms[tree.honest] == d)
            assert abs(nb - nh) <= 1
        leaves = np.flatnonzero(tree.feature < 0)
        counts = np.bincount(tree.honest_leaf, minlength=tree.n_nodes)[leaves]
        assert counts.min() >= cfg.min_leaf
        # honest leaf labels agree with routing
        assert np.array_equal(tree.apply(small_data.X[tree.honest], small_forest.categorical),
                              tree.honest_leaf)
    one = dataclasses.replace(small_forest, trees=small_forest.trees[:1])
    w = compute_weights(one)
    for d in range(4):
        assert np.isin(np.unique(w.arm(d).indices), one.trees[0].honest).all()


def test_building_outcomes_do_not_enter_estimates(small_forest, small_data):
    tree = small_forest.trees[0]
    one = dataclasses.replace(small_forest, trees=[tree])
    y = small_data.outcome("emp_0_30").astype(float)
    y2 = y.copy()
    building = np.setdiff1d(np.arange(small_data.n), tree.honest)
    y2[building] += 1000.0
    assert np.array_equal(predict_potential(one, y), predict_potential(one, y2))


def test_weight_support_grows_with_min_leaf(small_data):
    # below about 10 units the every-arm-in-every-leaf rule binds, not min_leaf
    nnz = []
    for leaf in (2, 20, 60, 150):
        f = build_forest(small_data, ForestConfig(n_trees=20, min_leaf=leaf, seed=5))
        w = compute_weights(f)
        nnz.append(np.mean([np.diff(w.arm(d).indptr).mean() for d in range(4)]))
    assert all(a <= b for a, b in zip(nnz, nnz[1:]))


def test_missing_arm_raises(small_data):
    keep = np.flatnonzero(small_data.treatment != 3)
    with pytest.raises(DataError, match="OT"):
        build_forest(small_data.subset(keep), ForestConfig(n_trees=1))


@pytest.mark.parametrize("bad", [{"subsample_share": 0}, {"subsample_share": 1.2},
                                 {"min_leaf": 1}, {"m_try": 0}, {"n_trees": 0},
                                 {"penalty_mult": -1}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ForestConfig(**bad)


def test_forest_json_round_trip(tmp_path, small_forest, small_data, small_weights):
    path = tmp_path / "forest.json"
    small_forest.to_json(path)
    again = ForestModel.from_json(path, small_data, small_forest.y_tree)
    w = compute_weights(again)
    for d in range(4):
        assert abs(w.arm(d) - small_weights.arm(d)).max() == 0
    other = small_data.subset(np.arange(small_data.n - 1))
    with pytest.raises(DataError):
        ForestModel.from_json(path, other)


def test_tune_m_try_returns_smallest_oob_mse(small_data):
    best, results = tune_m_try(small_data, ForestConfig(n_trees=10, seed=1), candidates=(2, 6, 40))
    assert set(results) == {2, 6, small_data.p}
    assert results[best] == min(results.values())


# ---------------------------------------------------------------------------
# weight diagnostics

def _single_row_weights(row_by_arm, n_units):
    treatment = np.repeat(np.arange(4), n_units)
    mats = []
    for d in range(4):
        m = np.zeros((len(row_by_arm[d]), 4 * n_units))
        m[:, d * n_units:(d + 1) * n_units] = row_by_arm[d]
        mats.append(sp.csr_matrix(m))
    return WeightMatrix(mats, np.ones((len(row_by_arm[0]), 4), bool), treatment)


def test_uniform_weights_exceed_no_threshold():
    w = _single_row_weights([np.full((1, 100), 0.01)] * 4, 100)
    diag = weight_diagnostics(w)
    for row in diag["rows"]:
        assert all(row[k] == 0 for k in ("1%", "3%", "4%", "10%", "25%"))
    assert not diag["concern"]


def test_quarter_weight_lands_in_top_bins():
    row = np.zeros((1, 76))
    row[0, 0] = 0.25
    row[0, 1:] = 0.01
    w = _single_row_weights([row] * 4, 76)
    diag = weight_diagnostics(w)
    iate = [r for r in diag["rows"] if r["level"] == "IATE"][0]
    assert iate["4%"] == iate["10%"] == iate["25%"] == pytest.approx(1 / 76)
    assert diag["concern"]


def test_concern_only_from_ate_level():
    # every target puts all mass on one unit, but the average row is uniform
    rows = np.eye(100)
    w = _single_row_weights([rows] * 4, 100)
    diag = weight_diagnostics(w)
    iate = [r for r in diag["rows"] if r["level"] == "IATE"]
    assert all(r["max"] == 1.0 for r in iate)
    assert not diag["concern"]
    gate = weight_diagnostics(w, groups={"first": np.arange(100) < 10})
    assert any(r["level"] == "GATE:first" for r in gate["rows"])


# ---------------------------------------------------------------------------
# feature deselection

def test_deselection_with_few_features_uses_singleton_groups(small_data):
    ds = small_data.select_features(["age", "unem_10jaar", "werk_2jaar", "noise_1", "noise_2"])
    res = feature_deselect(ds, ForestConfig(n_trees=10, seed=3), seed=3)
    assert all(len(g) == 1 for g in res.groups)
    assert set(res.retained) | set(res.deleted) == set(ds.feature_names)
    assert len(res.selection_idx) + len(res.estimation_idx) == ds.n
    assert not np.intersect1d(res.selection_idx, res.estimation_idx).size


def _deselection_runs(n_runs=20):
    out = []
    for s in range(n_runs):
        ds = generate_synthetic(SyntheticConfig(n=4000, seed=100 + s, shares=(0.2, 0.2, 0.2)))
        out.append(feature_deselect(ds, ForestConfig(n_trees=100, m_try=6, seed=s), seed=s))
    return out


@pytest.fixture(scope="module")
def deselection_runs():
    return _deselection_runs()


NOISE = ("noise_1", "noise_2", "noise_3")


@pytest.mark.slow
def test_outcome_driver_never_deleted(deselection_runs):
    for res in deselection_runs:
        assert "unem_10jaar" in res.retained


@pytest.mark.slow
def test_noise_vim_sign_is_a_coin_flip(deselection_runs):
    from scipy import stats
    positives = sum(res.vim[f] > 0 for res in deselection_runs for f in NOISE)
    total = len(deselection_runs) * len(NOISE)
    assert stats.binomtest(positives, total, 0.5, alternative="greater").pvalue > 0.01


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="a single-permutation VIM of an irrelevant feature is "
                   "zero in expectation, so each noise feature passes the non-positive rule "
                   "only about half of the time")
def test_noise_block_deleted_in_most_runs(deselection_runs):
    hits = sum(all(f in res.deleted for f in NOISE) for res in deselection_runs)
    assert hits >= 0.9 * len(deselection_runs)
