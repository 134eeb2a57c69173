import numpy as np
import pytest

from periop.models import (
    Dataset,
    EncodeColumn,
    GridSpec,
    NotFittedError,
    TreeModel,
    fit_forest,
    fit_gbm,
    fit_group_mean,
    fit_mean,
    fit_ridge,
    fit_tree,
    grid_search,
    mae,
    make_model,
    model_from_dict,
    split_indices,
    train_test_split,
)


def dataset(X, y, **kw):
    return Dataset(X=np.asarray(X, dtype=float), y=np.asarray(y, dtype=float), **kw)


def linear_dataset(n=40, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 10, size=(n, 2))
    y = 3.0 * X[:, 0] - 1.5 * X[:, 1] + 20.0 + noise * rng.normal(size=n)
    return dataset(X, y)


def test_dataset_validation():
    with pytest.raises(ValueError):
        dataset([[1.0], [np.inf]], [1.0, 2.0])
    with pytest.raises(ValueError):
        dataset([[1.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        dataset(np.zeros((0, 2)), [])


def test_split_sizes_and_partition():
    ds = dataset(np.arange(10).reshape(-1, 1), np.arange(10))
    train, test = train_test_split(ds, 0.2, seed=4)
    assert train.n == 8 and test.n == 2
    together = sorted(train.y.tolist() + test.y.tolist())
    assert together == list(range(10))


def test_split_deterministic_and_seed_sensitive():
    a1, b1 = split_indices(100, 0.2, seed=5)
    a2, b2 = split_indices(100, 0.2, seed=5)
    a3, b3 = split_indices(100, 0.2, seed=6)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(b1, b3)
    assert sorted(a1.tolist() + b1.tolist()) == list(range(100))


def test_split_requires_five_rows():
    with pytest.raises(ValueError):
        train_test_split(dataset(np.zeros((4, 1)), np.zeros(4)))


def test_mean_model():
    model = fit_mean(dataset(np.zeros((3, 0)), [10.0, 20.0, 30.0]))
    assert model.predict(np.zeros((5, 0))).tolist() == [20.0] * 5


def test_group_mean_with_fallback():
    ds = dataset([[0.0], [0.0], [1.0]], [10.0, 20.0, 40.0])
    model = fit_group_mean(ds, group_col=0)
    preds = model.predict(np.array([[0.0], [1.0], [2.0]]))
    assert preds[0] == pytest.approx(15.0)
    assert preds[1] == pytest.approx(40.0)
    assert preds[2] == pytest.approx(70.0 / 3.0)


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        make_model("mean").predict(np.zeros((1, 0)))
    with pytest.raises(NotFittedError):
        TreeModel().predict(np.zeros((1, 1)))


def test_predictions_clamped_non_negative():
    model = fit_mean(dataset(np.zeros((2, 0)), [-5.0, -7.0]))
    assert model.predict(np.zeros((3, 0))).tolist() == [0.0, 0.0, 0.0]


def test_ridge_exact_linear():
    model = fit_ridge(dataset([[0.0], [1.0], [2.0]], [1.0, 3.0, 5.0]), lam=0.0)
    assert model.coef_[0] == pytest.approx(2.0, abs=1e-9)
    assert model.intercept_ == pytest.approx(1.0, abs=1e-9)


def test_ridge_huge_lambda_collapses_to_mean():
    ds = linear_dataset(noise=0.1)
    model = fit_ridge(ds, lam=1e9)
    assert np.allclose(model.predict(ds.X), ds.y.mean(), atol=1e-3)
    assert np.allclose(model.coef_, 0.0, atol=1e-6)


def test_ridge_duplicated_column_splits_weight():
    ds = linear_dataset(noise=0.05)
    dup = fit_ridge(dataset(np.hstack([ds.X, ds.X[:, :1]]), ds.y), lam=0.5)
    assert np.all(np.isfinite(dup.coef_))
    # the duplicated column carries two equal half-weights; folding their sum
    # back onto a single column reproduces the same predictions
    assert dup.coef_[0] == pytest.approx(dup.coef_[2], abs=1e-8)
    X_new = np.random.default_rng(1).uniform(0, 10, size=(10, 2))
    X_dup = np.hstack([X_new, X_new[:, :1]])
    folded = X_new @ np.array([dup.coef_[0] + dup.coef_[2], dup.coef_[1]]) + dup.intercept_
    assert np.allclose(np.maximum(folded, 0), dup.predict(X_dup), atol=1e-8)


def test_ridge_singular_at_zero_lambda():
    X = np.ones((5, 2))  # duplicated constant columns, collinear with intercept
    with pytest.raises(ValueError, match="lambda"):
        fit_ridge(dataset(X, np.arange(5)), lam=0.0)


def test_tree_depth_zero_is_mean_leaf():
    ds = dataset([[0.0], [1.0]], [4.0, 8.0])
    model = fit_tree(ds, max_depth=0, min_leaf=1)
    assert model.root_ == {"value": 6.0}


def test_tree_best_split_matches_enumeration():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0.0, 0.0, 10.0, 10.0])
    model = fit_tree(dataset(X, y), max_depth=1, min_leaf=1)
    assert model.root_["feature"] == 0
    assert model.root_["threshold"] == pytest.approx(0.5)
    assert model.root_["left"]["value"] == 0.0
    assert model.root_["right"]["value"] == 10.0
    # exhaustive check: weighted SSE of the chosen split is minimal
    def split_sse(col, thr):
        left = y[X[:, col] < thr]
        right = y[X[:, col] >= thr]
        if len(left) == 0 or len(right) == 0:
            return np.inf
        return np.sum((left - left.mean()) ** 2) + np.sum((right - right.mean()) ** 2)

    candidates = [split_sse(0, t) for t in (0.5,)]
    assert min(candidates) == pytest.approx(0.0)


def test_tree_constant_target_single_leaf():
    ds = dataset(np.random.default_rng(0).normal(size=(15, 2)), np.full(15, 7.0))
    model = fit_tree(ds, max_depth=6, min_leaf=1)
    assert model.root_ == {"value": 7.0}


def test_tree_min_leaf_respected():
    rng = np.random.default_rng(3)
    ds = dataset(rng.normal(size=(30, 2)), rng.normal(size=30))
    model = fit_tree(ds, max_depth=6, min_leaf=5)

    def check(node, rows):
        if "value" in node:
            assert len(rows) >= 5
            return
        mask = ds.X[rows, node["feature"]] < node["threshold"]
        check(node["left"], rows[mask])
        check(node["right"], rows[~mask])

    check(model.root_, np.arange(30))


def test_forest_degenerate_equals_tree():
    ds = linear_dataset(n=60, seed=2, noise=1.0)
    tree = fit_tree(ds, max_depth=5, min_leaf=2)
    forest = fit_forest(
        ds, n_trees=1, max_depth=5, min_leaf=2, feature_fraction=1.0, bootstrap=False, seed=0
    )
    assert np.array_equal(tree.predict(ds.X), forest.predict(ds.X))


def test_forest_predictions_within_target_range():
    rng = np.random.default_rng(5)
    ds = dataset(rng.normal(size=(80, 3)), rng.uniform(10, 200, size=80))
    model = fit_forest(ds, n_trees=20, max_depth=6, min_leaf=2, feature_fraction=0.6, seed=3)
    preds = model.predict(rng.normal(size=(50, 3)))
    assert preds.min() >= ds.y.min() - 1e-9
    assert preds.max() <= ds.y.max() + 1e-9


def test_forest_seeded_determinism():
    ds = linear_dataset(n=50, seed=8, noise=2.0)
    a = fit_forest(ds, n_trees=10, max_depth=4, min_leaf=2, feature_fraction=0.5, seed=21)
    b = fit_forest(ds, n_trees=10, max_depth=4, min_leaf=2, feature_fraction=0.5, seed=21)
    X = np.random.default_rng(0).uniform(0, 10, size=(20, 2))
    assert np.array_equal(a.predict(X), b.predict(X))


def test_gbm_zero_trees_is_global_mean():
    ds = linear_dataset(n=30, seed=1, noise=1.0)
    gbm = fit_gbm(ds, n_trees=0)
    mean = fit_mean(ds)
    assert np.array_equal(gbm.predict(ds.X), mean.predict(ds.X))


def test_group_mean_single_group_is_global_mean():
    ds = dataset(np.zeros((6, 1)), [5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    grouped = fit_group_mean(ds, group_col=0)
    mean = fit_mean(ds)
    assert np.array_equal(grouped.predict(ds.X), mean.predict(np.zeros((6, 0))))


def test_gbm_interpolates_distinct_rows():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(8, 2))
    y = rng.uniform(5, 50, size=8)
    model = fit_gbm(dataset(X, y), n_trees=80, learning_rate=1.0, max_depth=4, min_leaf=1)
    assert mae(y, model.predict(X)) < 1e-9


def test_gbm_stagewise_loss_non_increasing():
    for seed in range(6):
        rng = np.random.default_rng(200 + seed)
        ds = dataset(rng.normal(size=(60, 3)), rng.uniform(0, 100, size=60))
        model = fit_gbm(ds, n_trees=25, learning_rate=0.3, max_depth=3, min_leaf=2, seed=seed)
        trace = model.stage_mse_
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_gbm_learning_rate_validation():
    ds = linear_dataset(n=10)
    with pytest.raises(ValueError):
        fit_gbm(ds, n_trees=1, learning_rate=0.0)
    with pytest.raises(ValueError):
        fit_gbm(ds, n_trees=1, learning_rate=1.5)


@pytest.mark.parametrize(
    "factory",
    [
        lambda ds: fit_mean(ds),
        lambda ds: fit_group_mean(dataset(np.round(ds.X[:, :1]), ds.y)),
        lambda ds: fit_ridge(ds, lam=0.3),
        lambda ds: fit_tree(ds, max_depth=4, min_leaf=2),
        lambda ds: fit_forest(ds, n_trees=5, max_depth=3, min_leaf=2, seed=1),
        lambda ds: fit_gbm(ds, n_trees=8, learning_rate=0.2, max_depth=2, min_leaf=2, seed=1),
    ],
)
def test_model_json_roundtrip(factory):
    ds = linear_dataset(n=40, seed=7, noise=3.0)
    model = factory(ds)
    clone = model_from_dict(model.to_dict())
    X = ds.X if clone.family != "mean" else np.zeros((ds.n, 0))
    if clone.family == "group-mean":
        X = np.round(ds.X[:, :1])
    if clone.family == "mean":
        X = np.zeros((5, 0))
    preds = model.predict(X)
    assert np.allclose(preds, clone.predict(X))
    assert np.all(np.isfinite(preds)) and np.all(preds >= 0)


def test_grid_search_single_candidate():
    ds = linear_dataset(n=30, seed=3, noise=0.5)
    result = grid_search(GridSpec(family="ridge", grid={"lam": [0.5]}, cv_folds=3, seed=0), ds)
    assert result.best_params == {"lam": 0.5}
    assert len(result.cv_table) == 1


def test_grid_search_prefers_sane_lambda():
    ds = linear_dataset(n=60, seed=4, noise=0.5)
    spec = GridSpec(family="ridge", grid={"lam": [0.1, 1e9]}, cv_folds=5, seed=1)
    result = grid_search(spec, ds)
    assert result.best_params == {"lam": 0.1}


def test_grid_search_tie_keeps_first():
    ds = linear_dataset(n=30, seed=5, noise=0.5)
    spec = GridSpec(family="ridge", grid={"lam": [0.2, 0.2]}, cv_folds=3, seed=2)
    result = grid_search(spec, ds)
    assert result.best_params == {"lam": 0.2}
    assert result.cv_table[0].mean_mae == result.cv_table[1].mean_mae


def test_grid_search_invariant_to_candidate_order():
    ds = linear_dataset(n=60, seed=4, noise=0.5)
    fwd = grid_search(GridSpec(family="ridge", grid={"lam": [0.1, 10.0, 1e6]}, cv_folds=4, seed=1), ds)
    rev = grid_search(GridSpec(family="ridge", grid={"lam": [1e6, 10.0, 0.1]}, cv_folds=4, seed=1), ds)
    assert fwd.best_params == rev.best_params == {"lam": 0.1}


def test_grid_search_excludes_failing_candidates():
    X = np.ones((20, 2))  # singular at lam=0
    ds = dataset(X, np.arange(20))
    spec = GridSpec(family="ridge", grid={"lam": [0.0, 1.0]}, cv_folds=4, seed=0)
    result = grid_search(spec, ds)
    assert result.best_params == {"lam": 1.0}
    failed = [row for row in result.cv_table if row.error is not None]
    assert len(failed) == 1 and failed[0].params == {"lam": 0.0}
    with pytest.raises(ValueError):
        grid_search(GridSpec(family="ridge", grid={"lam": [0.0]}, cv_folds=4, seed=0), ds)


def test_grid_search_refits_encoders_per_fold():
    rng = np.random.default_rng(9)
    codes = rng.integers(0, 4, size=60).astype(float)
    y = codes * 25.0 + rng.normal(0, 1.0, size=60)
    ds = dataset(np.column_stack([codes]), y)
    spec = GridSpec(family="gbm", grid={"n_trees": [20]}, cv_folds=4, seed=3)
    result = grid_search(spec, ds, encode_cols=(EncodeColumn(0, m=2.0),))
    assert result.cv_table[0].error is None
    assert result.cv_table[0].mean_mae < 10.0


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(family="nope", grid={})
    with pytest.raises(ValueError):
        GridSpec(family="ridge", grid={"lam": []})
    with pytest.raises(ValueError):
        GridSpec(family="ridge", grid={"lam": [1.0]}, cv_folds=1)
