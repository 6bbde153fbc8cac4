from dataclasses import replace

import numpy as np
import pytest

from lassoforest.core import Dataset, derive_stream
from lassoforest.ensemble import (
    DegenerateImportanceError,
    FitConfig,
    LassoedModel,
    fit_lassoed,
    fit_post_selection,
    model_from_json,
    model_to_json,
    predict_lassoed,
    predict_lassoed_rows,
    split_halves,
    vanilla_importance,
    variable_importance,
)
from lassoforest.forest import TreeParams, forest_mean_predict_rows, split_counts
from lassoforest.simgen import draw_polynomial_spec, fixed_support_spec, gen_polynomial


def _poly_data(n=200, p=12, s=4.0, seed=0, n_rows=None):
    rng = derive_stream(seed, 0)
    spec = draw_polynomial_spec(n, p, s, rng=rng.child(0))
    return spec, gen_polynomial(spec, rng.child(1), n_rows=n_rows)


def _small_cfg(seed=11, **kw):
    base = dict(n_trees=30, seed=seed, cv_folds=5, n_lambda=40)
    base.update(kw)
    return FitConfig(**base)


class TestSplitHalves:
    def test_even_split(self):
        d1, d2 = split_halves(4, derive_stream(0, 0))
        assert len(d1) == 2 and len(d2) == 2
        assert sorted(np.concatenate([d1, d2]).tolist()) == [0, 1, 2, 3]

    def test_odd_split_first_half_larger(self):
        d1, d2 = split_halves(5, derive_stream(0, 0))
        assert len(d1) == 3 and len(d2) == 2

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_halves(3, derive_stream(0, 0))

    def test_membership_roughly_uniform(self):
        # every index within 0.5 +- 0.1; 600 seeds keep the binomial noise
        # (sd ~ 0.02) small enough that the max over 400 indices clears 0.1
        n, seeds = 400, 600
        counts = np.zeros(n)
        for k in range(seeds):
            d1, _ = split_halves(n, derive_stream(k, 0))
            counts[d1] += 1
        freq = counts / seeds
        assert np.all(np.abs(freq - 0.5) <= 0.1)


class TestConfigValidation:
    def test_grid_must_be_sorted_unique(self):
        with pytest.raises(ValueError):
            FitConfig(theta_grid=(0.5, 0.25))
        with pytest.raises(ValueError):
            FitConfig(theta_grid=(0.0, 0.0, 1.0))

    def test_grid_must_be_in_unit_interval(self):
        with pytest.raises(ValueError):
            FitConfig(theta_grid=(0.0, 1.5))


class TestReductionIdentities:
    def test_grid_one_equals_post_selection(self):
        _, data = _poly_data(seed=1)
        cfg = _small_cfg(seed=21)
        post = fit_post_selection(data, cfg)
        one = fit_lassoed(data, replace(cfg, theta_grid=(1.0,)))
        assert model_to_json(one) == model_to_json(post)

    def test_grid_zero_equals_forest_mean(self):
        _, data = _poly_data(seed=2)
        cfg = _small_cfg(seed=22, theta_grid=(0.0,))
        model = fit_lassoed(data, cfg)
        assert model.theta_hat == 0.0
        X = np.random.default_rng(5).standard_normal((50, data.n_features))
        pred = predict_lassoed_rows(model, X)
        vanilla = model.transform.invert(forest_mean_predict_rows(model.forest, X))
        assert np.abs(pred - vanilla).max() < 1e-12

    def test_fit_both_matches_separate_fits(self):
        _, data = _poly_data(seed=19)
        cfg = _small_cfg(seed=39)
        from lassoforest.ensemble import fit_both

        post, lassoed = fit_both(data, cfg)
        assert model_to_json(post) == model_to_json(fit_post_selection(data, cfg))
        assert model_to_json(lassoed) == model_to_json(fit_lassoed(data, cfg))

    def test_selected_theta_is_curve_argmin(self):
        _, data = _poly_data(seed=3)
        model = fit_lassoed(data, _small_cfg(seed=23))
        curve = model.cv_curve
        best = min(curve.values())
        assert curve[model.theta_hat] == best
        # ties resolve to the smallest theta
        tied = [t for t, v in curve.items() if v == best]
        assert model.theta_hat == min(tied)


class TestPredict:
    def test_theta_one_uniform_weights_reproduce_mean(self):
        _, data = _poly_data(seed=4)
        model = fit_post_selection(data, _small_cfg(seed=24))
        J = model.forest.n_trees
        rigged = LassoedModel(
            forest=model.forest, theta_hat=1.0, gamma0_hat=0.0,
            gamma_hat=np.full(J, 1.0 / J), lambda_hat=0.0,
            transform=model.transform, cv_curve={1.0: 0.0},
            split_d1=model.split_d1, split_d2=model.split_d2,
        )
        X = np.random.default_rng(6).standard_normal((20, data.n_features))
        pred = predict_lassoed_rows(rigged, X)
        vanilla = model.transform.invert(forest_mean_predict_rows(model.forest, X))
        assert np.abs(pred - vanilla).max() < 1e-12

    def test_half_blend_hand_arithmetic(self):
        _, data = _poly_data(n=60, p=4, seed=5)
        base = fit_post_selection(data, _small_cfg(seed=25, n_trees=2))
        gamma = np.array([0.3, -0.2])
        rigged = LassoedModel(
            forest=base.forest, theta_hat=0.5, gamma0_hat=0.1, gamma_hat=gamma,
            lambda_hat=0.0, transform=base.transform, cv_curve={0.5: 0.0},
            split_d1=base.split_d1, split_d2=base.split_d2,
        )
        x = data.features[0]
        from lassoforest.forest import predict_tree

        t = np.array([predict_tree(tree, x) for tree in base.forest.trees])
        expected_std = 0.5 * (0.1 + t @ gamma) + 0.5 * t.mean()
        expected = base.transform.invert(expected_std)
        assert predict_lassoed(rigged, x) == pytest.approx(expected, abs=1e-12)

    def test_affine_in_theta(self):
        _, data = _poly_data(n=80, p=5, seed=6)
        base = fit_post_selection(data, _small_cfg(seed=26, n_trees=10))
        X = np.random.default_rng(7).standard_normal((25, 5))

        def at_theta(theta):
            m = LassoedModel(
                forest=base.forest, theta_hat=theta, gamma0_hat=base.gamma0_hat,
                gamma_hat=base.gamma_hat, lambda_hat=base.lambda_hat,
                transform=base.transform, cv_curve={theta: 0.0},
                split_d1=base.split_d1, split_d2=base.split_d2,
            )
            return predict_lassoed_rows(m, X)

        lo, hi, mid = at_theta(0.25), at_theta(0.75), at_theta(0.5)
        assert np.abs(0.5 * (lo + hi) - mid).max() < 1e-10

    def test_dimension_mismatch(self):
        _, data = _poly_data(seed=7)
        model = fit_post_selection(data, _small_cfg(seed=27))
        with pytest.raises(ValueError):
            predict_lassoed(model, np.ones(data.n_features + 1))


class TestDuplicateTrees:
    def test_duplicated_columns_select_sparse_representative(self):
        # all trees identical: after the intercept, the selection keeps at
        # most one distinct tree column active (shared-column symmetry)
        gen = np.random.default_rng(8)
        X = gen.standard_normal((120, 3))
        y = np.where(X[:, 0] > 0, 1.0, -1.0) + 0.05 * gen.standard_normal(120)
        data = Dataset(features=X, response=y)
        cfg = _small_cfg(
            seed=28, n_trees=8,
            tree_params=TreeParams(mtry=3, min_node_size=30, max_leaf_nodes=2),
        )
        model = fit_post_selection(data, cfg)
        # trees grown on bootstraps of the same strong step can differ a bit;
        # count distinct prediction columns actually used
        from lassoforest.forest import prediction_matrix

        sub = data.subset(model.split_d2)
        work_resp = model.transform.apply(sub.response)
        cols = prediction_matrix(model.forest, sub).values
        used = np.flatnonzero(model.gamma_hat != 0.0)
        distinct = np.unique(np.round(cols[:, used], 12), axis=1).shape[1] if used.size else 0
        assert distinct <= max(1, np.unique(np.round(cols, 12), axis=1).shape[1] // 2 + 1)
        assert model.theta_hat == 1.0

    def test_lambda_max_forces_zero_model(self):
        _, data = _poly_data(seed=9)
        # path squeezed against lambda_max: the fit collapses to (numerically)
        # zero on the standardized scale even if the lower point is chosen
        cfg = _small_cfg(seed=29, n_lambda=2, lambda_min_ratio=1.0 - 1e-12)
        model = fit_post_selection(data, cfg)
        assert np.abs(model.gamma_hat).max() < 1e-8
        assert abs(model.gamma0_hat) < 1e-8
        X = np.random.default_rng(9).standard_normal((10, data.n_features))
        pred = predict_lassoed_rows(model, X)
        assert np.abs(pred - model.transform.invert(0.0)).max() < 1e-6


class TestInvariances:
    def test_response_affine_equivariance(self):
        _, data = _poly_data(n=150, p=8, seed=10)
        cfg = _small_cfg(seed=30)
        model_a = fit_lassoed(data, cfg)
        shifted = Dataset(features=data.features, response=3.0 + 2.0 * data.response)
        model_b = fit_lassoed(shifted, cfg)
        assert model_b.theta_hat == model_a.theta_hat
        X = np.random.default_rng(10).standard_normal((40, 8))
        pa = predict_lassoed_rows(model_a, X)
        pb = predict_lassoed_rows(model_b, X)
        assert np.abs(pb - (3.0 + 2.0 * pa)).max() < 1e-8

    def test_same_seed_reproduces_model(self):
        _, data = _poly_data(seed=12)
        cfg = _small_cfg(seed=31)
        assert model_to_json(fit_lassoed(data, cfg)) == model_to_json(fit_lassoed(data, cfg))

    def test_serialization_round_trip(self):
        _, data = _poly_data(seed=13)
        model = fit_lassoed(data, _small_cfg(seed=32))
        doc = model_to_json(model)
        assert model_to_json(model_from_json(doc)) == doc

    def test_no_cross_fit_variant_runs(self):
        _, data = _poly_data(n=100, p=6, seed=14)
        cfg = _small_cfg(seed=33, cross_fit=False, n_trees=40)
        model = fit_lassoed(data, cfg)
        assert len(model.split_d2) == data.n_rows
        X = np.random.default_rng(11).standard_normal((10, 6))
        assert np.isfinite(predict_lassoed_rows(model, X)).all()


class TestImportance:
    def test_theta_zero_gives_normalized_counts(self):
        _, data = _poly_data(seed=15)
        model = fit_lassoed(data, _small_cfg(seed=34, theta_grid=(0.0,)))
        imp = variable_importance(model)
        counts = split_counts(model.forest).sum(axis=1)
        assert np.abs(imp.kappa - counts / counts.sum()).max() < 1e-15
        assert imp.kappa.sum() == pytest.approx(1.0, abs=1e-9)

    def test_single_feature_forest_is_unit_vector(self):
        gen = np.random.default_rng(16)
        X = np.zeros((100, 4))
        X[:, 2] = gen.uniform(-1, 1, 100)
        y = np.sign(X[:, 2]) + 0.1 * gen.standard_normal(100)
        data = Dataset(features=X, response=y)
        cfg = _small_cfg(seed=35, n_trees=10, tree_params=TreeParams(mtry=4))
        for model in (fit_lassoed(data, cfg), fit_post_selection(data, cfg)):
            kappa = variable_importance(model).kappa
            assert kappa[2] == pytest.approx(1.0, abs=1e-9)
            assert np.abs(np.delete(kappa, 2)).max() == 0.0

    def test_sums_to_one_with_nonnegative_weights(self):
        spec = fixed_support_spec(240, 10, s=8.0)
        data = gen_polynomial(spec, derive_stream(17, 1))
        model = fit_lassoed(data, _small_cfg(seed=36))
        imp = variable_importance(model, absolute=True)
        assert imp.kappa.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(imp.kappa >= 0)

    def test_all_stump_forest_is_degenerate(self):
        data = Dataset(features=np.random.default_rng(0).standard_normal((50, 3)),
                       response=np.full(50, 1.0))
        cfg = _small_cfg(seed=37, n_trees=5, standardize_response=False)
        model = fit_lassoed(data, replace(cfg, theta_grid=(0.0,)))
        with pytest.raises(DegenerateImportanceError):
            variable_importance(model)

    def test_vanilla_importance_matches_theta_zero(self):
        _, data = _poly_data(seed=18)
        model = fit_lassoed(data, _small_cfg(seed=38, theta_grid=(0.0,)))
        a = vanilla_importance(model.forest).kappa
        b = variable_importance(model).kappa
        assert np.array_equal(a, b)
