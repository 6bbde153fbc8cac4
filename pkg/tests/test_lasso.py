import numpy as np
import pytest

from lassoforest.core import derive_stream
from lassoforest.lasso import (
    LassoProblem,
    assign_folds,
    coordinate_descent,
    cv_select_lambda,
    kkt_residual,
    lambda_max,
    lambda_path,
    solve_path,
)


def _random_problem(n=80, k=10, seed=0, penalize_intercept=True, noise=0.3):
    gen = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), gen.standard_normal((n, k))])
    coef = gen.standard_normal(k + 1)
    y = X @ coef + noise * gen.standard_normal(n)
    return LassoProblem(design=X, target=y, offset=np.zeros(n),
                        penalize_intercept=penalize_intercept)


class TestProblemValidation:
    def test_intercept_column_must_be_ones(self):
        with pytest.raises(ValueError, match="ones"):
            LassoProblem(design=np.zeros((4, 2)), target=np.zeros(4), offset=np.zeros(4))

    def test_shapes_must_agree(self):
        X = np.column_stack([np.ones(4), np.arange(4.0)])
        with pytest.raises(ValueError):
            LassoProblem(design=X, target=np.zeros(3), offset=np.zeros(4))


class TestLambdaMax:
    def test_target_equals_offset_gives_zero(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        y = np.arange(5.0) * 2
        prob = LassoProblem(design=X, target=y, offset=y.copy())
        assert lambda_max(prob) == 0.0

    def test_single_column_hand_kkt(self):
        # centered unit-variance column, centered target, unpenalized intercept
        gen = np.random.default_rng(1)
        x = gen.standard_normal(200)
        x = (x - x.mean()) / x.std()
        y = 0.7 * x + gen.standard_normal(200)
        y = y - y.mean()
        prob = LassoProblem(
            design=np.column_stack([np.ones(200), x]), target=y,
            offset=np.zeros(200), penalize_intercept=False,
        )
        assert lambda_max(prob) == pytest.approx(abs(2.0 / 200 * (x @ y)), rel=1e-12)

    def test_zero_solution_at_lambda_max(self):
        for seed in range(5):
            prob = _random_problem(seed=seed)
            sol = coordinate_descent(prob, lambda_max(prob))
            assert np.all(sol.coefficients() == 0.0)
            # and strictly below, something activates
            sol2 = coordinate_descent(prob, 0.99 * lambda_max(prob))
            assert np.any(sol2.coefficients() != 0.0)


class TestCoordinateDescent:
    def test_lambda_zero_matches_normal_equations(self):
        # tol tightened below the default: the oracle demands 1e-8 agreement
        for seed in range(5):
            prob = _random_problem(n=90, k=12, seed=seed)
            sol = coordinate_descent(prob, 0.0, tol=1e-10)
            X, y = prob.design, prob.target
            ols = np.linalg.solve(X.T @ X, X.T @ y)
            assert np.abs(sol.coefficients() - ols).max() < 1e-8
            assert sol.converged

    def test_offset_has_unit_coefficient(self):
        # solving with offset o equals solving target - o with zero offset
        gen = np.random.default_rng(7)
        prob = _random_problem(n=60, k=5, seed=7)
        o = gen.standard_normal(60)
        with_offset = LassoProblem(design=prob.design, target=prob.target + o, offset=o)
        plain = LassoProblem(design=prob.design, target=prob.target, offset=np.zeros(60))
        a = coordinate_descent(with_offset, 0.05)
        b = coordinate_descent(plain, 0.05)
        assert np.abs(a.coefficients() - b.coefficients()).max() < 1e-12

    def test_matches_brute_force_grid(self):
        # 3-coefficient toy at lambda=0.1 vs dense grid search (coarse pass
        # then 1e-3 refinement; valid for a convex objective)
        gen = np.random.default_rng(11)
        X = np.column_stack([np.ones(30), gen.standard_normal((30, 2))])
        y = 0.4 + 0.8 * X[:, 1] - 0.5 * X[:, 2] + 0.2 * gen.standard_normal(30)
        prob = LassoProblem(design=X, target=y, offset=np.zeros(30))
        lam = 0.1
        sol = coordinate_descent(prob, lam)
        scales = np.array([1.0, np.std(X[:, 1]), np.std(X[:, 2])])

        def best_on(grids):
            g0, g1, g2 = np.meshgrid(*grids, indexing="ij")
            G = np.stack([g0, g1, g2], axis=-1).reshape(-1, 3)
            R = y[None, :] - G @ X.T
            obj = np.mean(R * R, axis=1) + lam * np.sum(np.abs(G) * scales[None, :], axis=1)
            return G[np.argmin(obj)]

        coarse = best_on([np.arange(-2.0, 2.0001, 0.04)] * 3)
        fine = best_on([np.arange(c - 0.05, c + 0.0501, 0.001) for c in coarse])
        assert np.abs(fine - sol.coefficients()).max() < 2e-3

    def test_kkt_certificate(self):
        for seed in range(8):
            prob = _random_problem(n=70, k=9, seed=seed)
            for lam in (0.0, 0.02, 0.2, 0.5 * lambda_max(prob)):
                sol = coordinate_descent(prob, lam)
                assert sol.converged
                assert kkt_residual(prob, sol) <= 1e-5

    def test_objective_nonincreasing(self):
        prob = _random_problem(n=100, k=15, seed=3)
        sol = coordinate_descent(prob, 0.03, keep_history=True)
        h = sol.objective_history
        assert len(h) >= 2
        assert all(h[i + 1] <= h[i] + 1e-12 for i in range(len(h) - 1))

    def test_nonconvergence_flagged(self):
        prob = _random_problem(n=50, k=20, seed=5)
        sol = coordinate_descent(prob, 1e-6, max_iter=2)
        assert not sol.converged
        assert sol.iterations == 2

    def test_zero_variance_column_skipped(self):
        gen = np.random.default_rng(9)
        X = np.column_stack([np.ones(40), gen.standard_normal(40), np.full(40, 2.0)])
        y = X[:, 1] + 0.1 * gen.standard_normal(40)
        prob = LassoProblem(design=X, target=y, offset=np.zeros(40))
        sol = coordinate_descent(prob, 0.01)
        assert sol.gamma[1] == 0.0

    def test_target_scaling_scales_solution(self):
        prob = _random_problem(n=60, k=6, seed=13)
        lam = 0.05
        base = coordinate_descent(prob, lam)
        # c = 2 with the stopping tolerance scaled too: every float op scales
        # exactly and the iteration paths mirror, so equality is bitwise
        doubled = LassoProblem(design=prob.design, target=2.0 * prob.target,
                               offset=np.zeros(60))
        sol2 = coordinate_descent(doubled, 2.0 * lam, tol=2e-7)
        assert np.array_equal(sol2.coefficients(), 2.0 * base.coefficients())
        assert lambda_max(doubled) == 2.0 * lambda_max(prob)
        # general factor within solver tolerance
        c = 3.7
        scaled = LassoProblem(design=prob.design, target=c * prob.target, offset=np.zeros(60))
        solc = coordinate_descent(scaled, c * lam, tol=1e-10)
        ref = coordinate_descent(prob, lam, tol=1e-10)
        assert np.abs(solc.coefficients() - c * ref.coefficients()).max() < 1e-8

    def test_n_nonzero_counts_intercept_when_penalized(self):
        prob = _random_problem(n=60, k=4, seed=15)
        sol = coordinate_descent(prob, 0.01)
        expected = int(np.count_nonzero(sol.gamma)) + int(sol.gamma0 != 0.0)
        assert sol.n_nonzero == expected


class TestLambdaPath:
    def test_two_point_path(self):
        prob = _random_problem(seed=2)
        lmax = lambda_max(prob)
        path = lambda_path(prob, 2, 0.5)
        assert path[0] == pytest.approx(lmax, rel=1e-15)
        assert path[1] == pytest.approx(0.5 * lmax, rel=1e-12)

    def test_default_path_shape(self):
        prob = _random_problem(seed=2)
        path = lambda_path(prob, 100, 1e-4)
        assert path.shape == (100,)
        assert np.all(np.diff(path) < 0)

    def test_degenerate_path(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        y = np.zeros(5)
        prob = LassoProblem(design=X, target=y, offset=np.zeros(5))
        assert lambda_path(prob, 10, 0.1).tolist() == [0.0]

    def test_warm_equals_cold(self):
        prob = _random_problem(n=90, k=12, seed=4)
        path = lambda_path(prob, 40, 1e-3)
        warm = solve_path(prob, path)
        for lam, w in zip(path, warm):
            cold = coordinate_descent(prob, float(lam))
            assert np.abs(w.coefficients() - cold.coefficients()).max() < 1e-6


class TestCrossValidation:
    def test_recovers_linear_signal(self):
        gen = np.random.default_rng(21)
        x = gen.standard_normal(120)
        y = 2.0 * x  # noiseless, exactly linear in one column
        X = np.column_stack([np.ones(120), x, gen.standard_normal((120, 3))])
        prob = LassoProblem(design=X, target=y, offset=np.zeros(120))
        cv = cv_select_lambda(prob, 5, derive_stream(21, 0))
        assert cv.chosen_index >= len(cv.lambdas) - 20  # near the path bottom
        assert cv.cv_errors[cv.chosen_index] < 1e-3

    def test_loo_matches_hand_rolled(self):
        gen = np.random.default_rng(23)
        n = 10
        X = np.column_stack([np.ones(n), gen.standard_normal((n, 2))])
        y = X[:, 1] - X[:, 2] + 0.3 * gen.standard_normal(n)
        prob = LassoProblem(design=X, target=y, offset=np.zeros(n))
        lams = lambda_path(prob, 12, 1e-2)
        folds = np.arange(n)  # leave-one-out
        cv = cv_select_lambda(prob, n, fold_assignment=folds, lambdas=lams)
        hand = np.zeros(len(lams))
        for i in range(n):
            keep = np.ones(n, dtype=bool)
            keep[i] = False
            sub = LassoProblem(design=X[keep], target=y[keep], offset=np.zeros(n - 1))
            for li, lam in enumerate(lams):
                sol = coordinate_descent(sub, float(lam))
                pred = X[i] @ sol.coefficients()
                hand[li] += (y[i] - pred) ** 2 / n
        # warm-started path vs cold hand loop: equal up to solver tolerance
        assert np.abs(cv.cv_errors - hand).max() < 1e-6

    def test_pure_noise_prefers_lambda_max(self):
        # Permuted target: the all-zero model should win for most seeds.
        # The minimum-CV argmin on a flat-plus-noise curve drifts a few path
        # steps by chance, so the all-zero selection is asserted under the
        # one-standard-error rule (designed for exactly this call) and the
        # default rule is checked to stay at the top of the path.
        hits_zero, hits_top = 0, 0
        n_seeds = 50
        for seed in range(n_seeds):
            gen = np.random.default_rng(1000 + seed)
            X = np.column_stack([np.ones(200), gen.standard_normal((200, 6))])
            y = gen.permutation(X[:, 1] + 0.2 * gen.standard_normal(200))
            prob = LassoProblem(design=X, target=y, offset=np.zeros(200))
            cv_1se = cv_select_lambda(prob, 5, derive_stream(seed, 1), n_lambda=50, rule="1se")
            cv_min = cv_select_lambda(prob, 5, derive_stream(seed, 1), n_lambda=50, rule="min")
            hits_zero += cv_1se.chosen_index == 0
            hits_top += cv_min.chosen_lambda >= 0.3 * cv_min.lambdas[0]
        assert hits_zero >= 0.8 * n_seeds
        assert hits_top >= 0.8 * n_seeds

    def test_fold_sizes_near_equal(self):
        folds = assign_folds(103, 5, derive_stream(3, 0))
        sizes = np.bincount(folds)
        assert sizes.max() - sizes.min() <= 1
        assert sizes.sum() == 103

    def test_too_many_folds_rejected(self):
        with pytest.raises(ValueError):
            assign_folds(4, 5, derive_stream(0, 0))

    def test_tie_prefers_larger_lambda(self):
        # a constant cv curve must pick the first (largest) lambda
        prob = _random_problem(n=40, k=3, seed=31)
        cv = cv_select_lambda(prob, 4, derive_stream(31, 0), n_lambda=10)
        ties = np.flatnonzero(cv.cv_errors == cv.cv_errors.min())
        assert cv.chosen_index == ties[0]

    def test_one_se_rule_is_more_conservative(self):
        prob = _random_problem(n=100, k=10, seed=33, noise=1.0)
        folds = assign_folds(100, 5, derive_stream(33, 0))
        cv_min = cv_select_lambda(prob, 5, fold_assignment=folds, rule="min")
        cv_1se = cv_select_lambda(prob, 5, fold_assignment=folds, rule="1se")
        assert cv_1se.chosen_lambda >= cv_min.chosen_lambda
