import json
import math
from dataclasses import replace

import numpy as np
import pytest

from rfqsrr import _rng
from rfqsrr.data import (Dataset, DegenerateDataError, SyntheticSpec, bootstrap,
                         generate_synthetic, split_2to1)
from rfqsrr.forest import (Forest, ForestParams, ModelMismatchError, fit_forest, oob_counts,
                           oob_diagnostics, oob_predict, oob_r2, permutation_importance, predict,
                           predict_each, r2_score, test_r2 as forest_test_r2, tree_seed)
from rfqsrr.tree import RegressionTree, TreeParams, fit_tree, predict_tree

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _oracle_permutation(key, f, rows):
    """Fisher-Yates driven by the documented splitmix64 stream, in plain ints."""
    state = _mix(key ^ ((GOLDEN * (f + 1)) & MASK64))
    perm = list(rows)
    for k in range(len(perm) - 1, 0, -1):
        state = (state + GOLDEN) & MASK64
        u = (_mix(state) >> 11) / 2.0 ** 53
        j = min(int(u * (k + 1)), k)
        perm[k], perm[j] = perm[j], perm[k]
    return perm


def _oracle_importance(f, d, seed):
    T, p = f.n_trees, d.p
    imp = np.zeros((T, p))
    for t, (tree, bag) in enumerate(zip(f.trees, f.bags)):
        oob = list(bag.oob_indices)
        if len(oob) < 2:
            continue
        base = np.mean((tree.predict(d.X[oob]) - d.y[oob]) ** 2)
        key = _rng.derive_seed(seed, _rng.IMPORTANCE, t)
        for j in tree.used_features():
            perm = _oracle_permutation(key, int(j), oob)
            Xp = d.X[oob].copy()
            Xp[:, j] = d.X[perm, j]
            imp[t, j] = np.mean((tree.predict(Xp) - d.y[oob]) ** 2) - base
    return imp


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(n=60, p=6, k_linear=2, k_nonlinear=2, seed=3))


def test_single_tree_forest_matches_fit_tree(small):
    params = ForestParams(n_trees=1, tree=TreeParams(mtry=2), seed=5)
    f = fit_forest(small, params)
    s0 = tree_seed(5, 0)
    bag = bootstrap(small, s0)
    t = fit_tree(small, bag.indices, replace(params.tree, seed=s0))
    assert f.trees[0] == t
    np.testing.assert_array_equal(f.bags[0].indices, bag.indices)


def test_thread_count_does_not_change_forest(small):
    params = ForestParams(n_trees=40, seed=8)
    a = fit_forest(small, params, threads=1).to_json()
    b = fit_forest(small, params, threads=4).to_json()
    assert a == b


def test_constant_response_forest(small):
    d = Dataset(small.compound_ids, small.descriptor_names, small.X, np.full(small.n, 2.0))
    f = fit_forest(d, ForestParams(n_trees=10))
    assert all(t.n_nodes == 1 for t in f.trees)
    np.testing.assert_array_equal(predict(f, small.X[:5] + 3), 2.0)


def test_predict_is_mean_of_tree_predictions(small):
    f = fit_forest(small, ForestParams(n_trees=25, seed=1))
    X = np.random.default_rng(0).normal(size=(100, small.p))
    want = [np.mean([predict_tree(t, x) for t in f.trees]) for x in X]
    np.testing.assert_allclose(predict(f, X), want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(predict_each(f, X).mean(axis=0), want, rtol=1e-12, atol=1e-12)
    assert isinstance(predict(f, X[0]), float)


def test_predict_two_trees_average():
    leaf = lambda v: RegressionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                                    np.array([v]), np.array([1]))
    d = Dataset(("a", "b"), ("x",), [[0.0], [1.0]], [0.0, 1.0])
    bags = [bootstrap(d, 0), bootstrap(d, 1)]
    f = Forest([leaf(1.0), leaf(3.0)], bags, ForestParams(n_trees=2), d.fingerprint(), [0, 1])
    assert predict(f, [7.0]) == 2.0


def test_predict_dimension_mismatch(small):
    f = fit_forest(small, ForestParams(n_trees=3))
    with pytest.raises(ModelMismatchError):
        predict(f, np.zeros(small.p + 1))


def test_oob_single_tree(small):
    f = fit_forest(small, ForestParams(n_trees=1, seed=2))
    pred = oob_predict(f, small)
    inbag = np.unique(f.bags[0].indices)
    assert np.all(np.isnan(pred[inbag]))
    for i in f.bags[0].oob_indices:
        assert pred[i] == predict_tree(f.trees[0], small.X[i])


def test_oob_contributing_trees():
    d = generate_synthetic(SyntheticSpec(n=200, p=5, k_linear=2, seed=1))
    f = fit_forest(d, ForestParams(n_trees=500, seed=3))
    counts = oob_counts(f)
    assert counts.min() >= 1
    assert abs(counts.mean() - 500 * (1 - 1 / 200) ** 200) < 10
    assert oob_diagnostics(f, d) == {"rows_used": 200, "rows_without_oob_tree": 0}


def test_oob_requires_training_data(small):
    f = fit_forest(small, ForestParams(n_trees=3))
    with pytest.raises(ModelMismatchError):
        oob_predict(f, small.rows(np.arange(10)))


def test_r2_hand_example():
    assert r2_score([0, 1, 2, 3], [0.5, 1, 2, 2.5]) == pytest.approx(0.9, abs=1e-15)


def test_r2_perfect_and_mean():
    y = np.array([1.0, 4.0, 2.0, 8.0])
    assert r2_score(y, y) == 1.0
    assert r2_score(y, np.full(4, y.mean())) == 0.0
    assert r2_score(y, -y) < 0


def test_r2_zero_variance():
    with pytest.raises(DegenerateDataError):
        r2_score([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_oob_and_test_r2_agree_on_same_rows(small):
    f = fit_forest(small, ForestParams(n_trees=30, seed=4))
    pred = predict(f, small.X)
    assert forest_test_r2(f, small) == r2_score(small.y, pred)


def test_forest_json_round_trip(tmp_path, small):
    f = fit_forest(small, ForestParams(n_trees=12, tree=TreeParams(max_depth=4), seed=6))
    f.save(tmp_path / "f.json")
    g = Forest.load(tmp_path / "f.json")
    assert g.to_json() == f.to_json()
    np.testing.assert_array_equal(predict(g, small.X), predict(f, small.X))
    np.testing.assert_array_equal(oob_predict(g, small), oob_predict(f, small))
    doc = json.loads(f.to_json())
    assert doc["fingerprint"] == small.fingerprint()
    assert doc["params"]["n_trees"] == 12


def test_bad_forest_document():
    with pytest.raises(ValueError):
        Forest.from_dict({"format": "something-else", "version": 1})


def test_profiles():
    assert ForestParams.profile("B1K").n_trees == 1000
    assert ForestParams.profile("b10k").n_trees == 10_000
    assert ForestParams.profile("b1k").tree == ForestParams.profile("b10k").tree
    with pytest.raises(ValueError):
        ForestParams.profile("b2k")


# --------------------------------------------------------------- importance

def test_importance_matches_oracle(small):
    f = fit_forest(small, ForestParams(n_trees=30, tree=TreeParams(mtry=3), seed=9))
    rep = permutation_importance(f, small, seed=12)
    imp = _oracle_importance(f, small, 12)
    np.testing.assert_allclose(rep.raw_importance, imp.mean(axis=0), rtol=1e-10, atol=1e-12)
    sd = imp.std(axis=0, ddof=1)
    z = np.where(sd > 0, imp.mean(axis=0) / (sd / math.sqrt(30)), 0.0)
    np.testing.assert_allclose(rep.z_score, z, rtol=1e-9, atol=1e-12)


def test_importance_block_combination_is_exact_enough():
    d = generate_synthetic(SyntheticSpec(n=40, p=4, k_linear=2, seed=0))
    f = fit_forest(d, ForestParams(n_trees=300, seed=1))
    rep = permutation_importance(f, d, seed=2)
    imp = _oracle_importance(f, d, 2)
    np.testing.assert_allclose(rep.raw_importance, imp.mean(axis=0), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(rep.sd, imp.std(axis=0, ddof=1), rtol=1e-9, atol=1e-12)


def test_unused_feature_is_exactly_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    X[:, 2] = 1.0  # constant column can never be split on
    d = Dataset(tuple(map(str, range(50))), ("a", "b", "c"), X, X[:, 0] + 0.1 * rng.normal(size=50))
    f = fit_forest(d, ForestParams(n_trees=50, seed=1))
    rep = permutation_importance(f, d, seed=1)
    assert not rep.used_in_forest[2]
    assert rep.raw_importance[2] == 0.0 and rep.z_score[2] == 0.0


def test_importance_is_thread_invariant(small):
    f = fit_forest(small, ForestParams(n_trees=300, seed=3))
    a = permutation_importance(f, small, seed=4, threads=1)
    b = permutation_importance(f, small, seed=4, threads=3)
    assert a.to_csv() == b.to_csv()


def test_duplicated_rows_keep_the_top_feature():
    for seed in range(5):
        d = generate_synthetic(SyntheticSpec(n=80, p=20, k_linear=1, noise_sd=0.1, seed=seed))
        dd = Dataset(d.compound_ids + tuple(c + "b" for c in d.compound_ids), d.descriptor_names,
                     np.vstack([d.X, d.X]), np.concatenate([d.y, d.y]))
        top = []
        for data in (d, dd):
            f = fit_forest(data, ForestParams(n_trees=100, seed=seed))
            top.append(int(np.argmax(permutation_importance(f, data, seed=seed).z_score)))
        assert top[0] == top[1]


def test_importance_csv_and_ranking():
    d = generate_synthetic(SyntheticSpec(n=60, p=5, k_linear=1, noise_sd=0.1, seed=2))
    f = fit_forest(d, ForestParams(n_trees=60, seed=1))
    rep = permutation_importance(f, d)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "feature,raw_importance,z_score,used"
    assert len(lines) == 6
    assert d.descriptor_names[rep.ranking()[0]].startswith("REL_")


def test_ranking_tie_breaks():
    from rfqsrr.forest import ImportanceReport
    rep = ImportanceReport(("a", "b", "c", "d"), np.array([1.0, 2.0, 2.0, 0.0]),
                           np.array([3.0, 3.0, 3.0, 5.0]), np.ones(4, bool), np.ones(4))
    assert rep.ranking().tolist() == [3, 1, 2, 0]


def test_oob_r2_tracks_test_r2_on_strong_signal():
    d = generate_synthetic(SyntheticSpec(n=250, p=30, k_linear=5, noise_sd=0.3, seed=1))
    s = split_2to1(d, 0)
    f = fit_forest(s.train, ForestParams(n_trees=200, seed=1))
    assert abs(oob_r2(f, s.train) - forest_test_r2(f, s.test)) < 0.15
