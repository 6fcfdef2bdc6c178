import numpy as np
import pytest

from regmarket.datasets import Dataset, generate_friedman, random_split
from regmarket.forest import ForestParams, grow_forest
from regmarket.market import (DeltaKernel, GaussianKernel, Market, active_set,
                              delta_update, gaussian_update, init_market,
                              load_market, predict, price_density, save_market,
                              select_sigma, train_epochs, update)
from regmarket.quadrature import hermite_gauss, integrate_ratio

from conftest import leaf_forest, normal_pdf
from helpers import trapezoid_kernel_integrals


def two_leaf_market(eta=0.1, kernel=None):
    forest = leaf_forest([0.0, 2.0], [1.0, 1.0])
    return init_market(forest, None, eta, kernel or DeltaKernel())


def grown_market(seed=0, kernel=None, trees=6, n=200, eta=0.05, depth_cap=None):
    data = generate_friedman(1, n, np.random.default_rng(seed))
    forest = grow_forest(data, ForestParams(trees=trees, pool_size=60,
                                            seed=seed))
    return data, init_market(forest, depth_cap, eta, kernel or DeltaKernel())


class TestInitMarket:
    def test_single_participant(self):
        market = init_market(leaf_forest([3.0], [1.0]), None, 0.1, DeltaKernel())
        assert market.num_participants == 1
        assert market.budgets[0] == 1.0

    def test_uniform_over_all_leaves(self):
        data, market = grown_market()
        assert np.all(market.budgets == market.budgets[0])
        assert abs(market.total_budget() - 1.0) <= 1e-12

    def test_depth_cap_changes_participants(self):
        data = generate_friedman(1, 300, np.random.default_rng(1))
        forest = grow_forest(data, ForestParams(trees=4, pool_size=60, seed=1))
        full = init_market(forest, None, 0.1, DeltaKernel())
        capped = init_market(forest, 2, 0.1, DeltaKernel())
        assert capped.num_participants < full.num_participants
        # at cap 2 each tree exposes at most 4 stop nodes
        assert capped.num_participants <= 4 * 4

    def test_eta_validation(self):
        forest = leaf_forest([0.0], [1.0])
        with pytest.raises(ValueError):
            init_market(forest, None, -0.1, DeltaKernel())
        with pytest.warns(UserWarning, match="clamped"):
            market = init_market(forest, None, 1.5, DeltaKernel())
        assert market.eta == 1.0


class TestActiveSet:
    def test_one_entry_per_tree(self):
        data, market = grown_market(trees=6)
        entries = active_set(market, data.features[0]).entries()
        assert len(entries) == 6

    def test_same_cell_same_participants(self):
        data, market = grown_market(trees=5)
        x = data.features[7]
        a = active_set(market, x)
        b = active_set(market, x + 1e-12)
        np.testing.assert_array_equal(a.pids, b.pids)

    def test_mass_positive(self):
        market = two_leaf_market()
        assert active_set(market, [0.0]).mass == 1.0


class TestPriceDensity:
    def test_single_standard_normal(self):
        market = init_market(leaf_forest([0.0], [1.0]), None, 0.1, DeltaKernel())
        value = price_density(active_set(market, [0.0]), 0.0)
        assert value == pytest.approx(0.3989423, abs=5e-8)

    def test_two_component_mixture(self):
        market = two_leaf_market()
        act = active_set(market, [0.0])
        assert price_density(act, 0.0) == pytest.approx(0.2264666, abs=5e-8)
        assert price_density(act, 1.0) == pytest.approx(0.2419707, abs=5e-8)

    def test_integrates_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = int(rng.integers(1, 8))
            means = rng.uniform(-5, 5, m)
            variances = rng.uniform(0.1, 4.0, m)
            market = init_market(leaf_forest(means, variances), None, 0.3,
                                 DeltaKernel())
            market.budgets = rng.dirichlet(np.ones(m))
            act = active_set(market, [0.0])
            sd = np.sqrt(variances.max())
            grid = np.linspace(means.min() - 10 * sd, means.max() + 10 * sd,
                               200_001)
            total = np.trapezoid(price_density(act, grid), grid)
            assert total == pytest.approx(1.0, abs=1e-6)


class TestPredict:
    def test_symmetric_two_leaves(self):
        market = two_leaf_market()
        assert predict(market, [0.0]) == 1.0

    def test_single_leaf(self):
        market = init_market(leaf_forest([3.25], [1.0]), None, 0.1,
                             DeltaKernel())
        assert predict(market, [9.9]) == 3.25

    def test_weighted(self):
        market = two_leaf_market()
        market.budgets = np.array([0.9, 0.1])
        assert predict(market, [0.0]) == pytest.approx(0.2, abs=1e-15)

    def test_equals_density_mean(self):
        rng = np.random.default_rng(6)
        means = rng.uniform(-3, 3, 5)
        variances = rng.uniform(0.2, 2.0, 5)
        market = init_market(leaf_forest(means, variances), None, 0.1,
                             DeltaKernel())
        market.budgets = rng.dirichlet(np.ones(5))
        act = active_set(market, [0.0])
        sd = np.sqrt(variances.max())
        grid = np.linspace(means.min() - 12 * sd, means.max() + 12 * sd,
                           400_001)
        by_integration = np.trapezoid(grid * price_density(act, grid), grid)
        assert predict(market, [0.0]) == pytest.approx(by_integration, abs=1e-6)


class TestDeltaUpdate:
    def test_hand_computed_two_participants(self):
        market = two_leaf_market(eta=0.1)
        delta_update(market, [0.0], 0.0)
        np.testing.assert_allclose(market.budgets, [0.5380790, 0.4619210],
                                   atol=1e-6)
        assert market.total_budget() == pytest.approx(1.0, abs=1e-12)

    def test_single_participant_never_moves(self):
        market = init_market(leaf_forest([1.0], [2.0]), None, 0.5, DeltaKernel())
        for y in (-50.0, 0.0, 1.0, 123.0):
            deltas = delta_update(market, [0.0], y)
            assert deltas[0] == 0.0
        assert market.budgets[0] == 1.0

    def test_identical_participants_stay_symmetric(self):
        market = init_market(leaf_forest([1.5, 1.5], [0.7, 0.7]), None, 0.2,
                             DeltaKernel())
        deltas = delta_update(market, [0.0], 2.0)
        np.testing.assert_allclose(deltas, 0.0, atol=1e-16)
        assert market.budgets[0] == market.budgets[1]

    def test_underflow_skips_instance(self):
        market = init_market(leaf_forest([0.0, 0.1], [1e-8, 1e-8]), None, 0.3,
                             DeltaKernel())
        before = market.budgets.copy()
        deltas = delta_update(market, [0.0], 1e6)
        np.testing.assert_array_equal(deltas, 0.0)
        np.testing.assert_array_equal(market.budgets, before)
        assert market.skipped == 1

    def test_inactive_budgets_untouched(self):
        data, market = grown_market(trees=5, eta=0.3)
        x, y = data.features[0], data.response[0]
        pids = market.assign_row(x)
        before = market.budgets.copy()
        delta_update(market, x, y)
        untouched = np.ones(market.num_participants, dtype=bool)
        untouched[pids] = False
        np.testing.assert_array_equal(market.budgets[untouched],
                                      before[untouched])
        assert market.total_budget() == pytest.approx(1.0, abs=1e-12)

    def test_nonnegativity_at_full_learning_rate(self):
        rng = np.random.default_rng(8)
        market = init_market(leaf_forest([-1.0, 0.0, 5.0], [0.3, 1.0, 2.0]),
                             None, 1.0, DeltaKernel())
        for _ in range(200):
            delta_update(market, [0.0], float(rng.uniform(-8, 8)))
            assert np.all(market.budgets >= 0.0)


class TestGaussianUpdate:
    def kernel(self, sigma):
        return GaussianKernel(sigma, hermite_gauss(5))

    def test_requires_gaussian_kernel(self):
        market = two_leaf_market()
        with pytest.raises(ValueError, match="not Gaussian"):
            gaussian_update(market, [0.0], 0.0)

    def test_single_participant_exactly_zero(self):
        market = init_market(leaf_forest([1.0], [2.0]), None, 0.5,
                             self.kernel(0.8))
        deltas = gaussian_update(market, [0.0], 5.0)
        assert deltas[0] == 0.0
        assert market.budgets[0] == 1.0

    def test_dirac_limit_matches_delta(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            m = int(rng.integers(2, 7))
            spread = float(rng.uniform(2.0, 20.0))
            means = rng.uniform(-spread, spread, m)
            variances = rng.uniform(0.2, 1.0, m) * (2 * spread) ** 2
            y = float(rng.uniform(-spread, spread))
            sigma = 1e-6 * (2 * spread)
            shared = rng.dirichlet(np.ones(m))

            d_market = init_market(leaf_forest(means, variances), None, 0.1,
                                   DeltaKernel())
            d_market.budgets = shared.copy()
            g_market = init_market(leaf_forest(means, variances), None, 0.1,
                                   self.kernel(sigma))
            g_market.budgets = shared.copy()

            d = delta_update(d_market, [0.0], y)
            g = gaussian_update(g_market, [0.0], y)
            np.testing.assert_allclose(g, d, rtol=1e-4, atol=1e-18)

    def test_matches_trapezoid_oracle(self):
        market = two_leaf_market(eta=0.1, kernel=self.kernel(0.5))
        before = market.budgets.copy()
        deltas = gaussian_update(market, [0.0], 0.0)
        integrals = trapezoid_kernel_integrals([0.0, 2.0], [1.0, 1.0],
                                               before / before.sum(), 0.0, 0.5)
        expected = 0.1 * before * (integrals - 1.0)
        np.testing.assert_allclose(deltas, expected, atol=5e-3)

    def test_matches_generic_integrate_ratio(self):
        rng = np.random.default_rng(10)
        means = rng.uniform(-3, 3, 4)
        variances = rng.uniform(0.3, 2.0, 4)
        weights = rng.dirichlet(np.ones(4))
        market = init_market(leaf_forest(means, variances), None, 0.2,
                             self.kernel(0.7))
        market.budgets = weights.copy()
        rule = hermite_gauss(5)

        def denominator(t):
            return sum(w * normal_pdf(t, m, v)
                       for w, m, v in zip(weights, means, variances))

        expected = np.array([
            0.2 * weights[i] * (integrate_ratio(
                rule, 1.3, 0.7,
                lambda t, i=i: normal_pdf(t, means[i], variances[i]),
                denominator) - 1.0)
            for i in range(4)
        ])
        deltas = gaussian_update(market, [0.0], 1.3)
        np.testing.assert_allclose(deltas, expected, rtol=1e-9, atol=1e-15)

    def test_far_tail_is_neutral(self):
        market = init_market(leaf_forest([0.0, 0.1], [1e-8, 1e-8]), None, 0.3,
                             self.kernel(1e-5))
        before = market.budgets.copy()
        deltas = gaussian_update(market, [0.0], 1e6)
        np.testing.assert_array_equal(deltas, 0.0)
        np.testing.assert_array_equal(market.budgets, before)

    def test_conservation_over_updates(self):
        rng = np.random.default_rng(11)
        market = init_market(
            leaf_forest(rng.uniform(-4, 4, 30), rng.uniform(0.1, 3.0, 30)),
            None, 0.8, self.kernel(1.2))
        for _ in range(500):
            gaussian_update(market, [0.0], float(rng.uniform(-6, 6)))
        assert abs(market.total_budget() - 1.0) <= 1e-9
        assert np.all(market.budgets >= 0.0)


class TestUpdateDispatch:
    def test_dispatches_by_kernel(self):
        d = two_leaf_market(kernel=DeltaKernel())
        g = two_leaf_market(kernel=GaussianKernel(1e-7, hermite_gauss(5)))
        du = update(d, [0.0], 0.0)
        gu = update(g, [0.0], 0.0)
        np.testing.assert_allclose(du, gu, rtol=1e-6)


class TestTrainEpochs:
    def split(self, seed=12, n=150):
        data = generate_friedman(1, n, np.random.default_rng(seed))
        return random_split(data, 0.2, np.random.default_rng(seed))

    def test_initial_market_equals_forest(self):
        train, test = self.split()
        forest = grow_forest(train, ForestParams(trees=10, pool_size=80, seed=3))
        market = init_market(forest, None, 0.05, DeltaKernel())
        grid = np.vstack([train.features, test.features])
        np.testing.assert_allclose(market.predict(grid), forest.predict(grid),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_learning_rate_freezes(self):
        train, test = self.split()
        forest = grow_forest(train, ForestParams(trees=5, pool_size=50, seed=4))
        market = init_market(forest, None, 0.0, DeltaKernel())
        uniform_train = market.predict(train.features)
        uniform_test = market.predict(test.features)
        from regmarket.stats import mse
        expect_train = mse(uniform_train, train.response)
        expect_test = mse(uniform_test, test.response)
        curve = train_epochs(market, train, test, epochs=5)
        assert np.all(curve.train_mse == expect_train)
        assert np.all(curve.test_mse == expect_test)

    def test_curve_shape_and_best_epoch(self):
        train, test = self.split()
        forest = grow_forest(train, ForestParams(trees=8, pool_size=60, seed=5))
        market = init_market(forest, None, 10.0 / train.num_rows, DeltaKernel())
        curve = train_epochs(market, train, test, epochs=12)
        assert curve.train_mse.shape == (12,) and curve.test_mse.shape == (12,)
        assert curve.best_test_mse == curve.test_mse[curve.best_epoch - 1]
        assert curve.best_test_mse == curve.test_mse.min()
        assert curve.final_test_mse == curve.test_mse[-1]
        assert abs(market.total_budget() - 1.0) <= 1e-9

    def test_training_improves_train_mse(self):
        train, test = self.split(seed=21, n=200)
        forest = grow_forest(train, ForestParams(trees=10, pool_size=80, seed=6))
        market = init_market(forest, None, 10.0 / train.num_rows, DeltaKernel())
        base = market.predict(train.features)
        from regmarket.stats import mse
        start = mse(base, train.response)
        curve = train_epochs(market, train, test, epochs=10)
        assert curve.train_mse[-1] < start

    def test_epochs_must_be_positive(self):
        train, test = self.split()
        forest = grow_forest(train, ForestParams(trees=2, pool_size=30, seed=7))
        market = init_market(forest, None, 0.1, DeltaKernel())
        with pytest.raises(ValueError):
            train_epochs(market, train, test, epochs=0)

    def test_gaussian_training_runs(self):
        train, test = self.split()
        forest = grow_forest(train, ForestParams(trees=5, pool_size=50, seed=8))
        market = init_market(forest, None, 10.0 / train.num_rows,
                             GaussianKernel(1.0, hermite_gauss(5)))
        curve = train_epochs(market, train, test, epochs=3)
        assert np.all(np.isfinite(curve.test_mse))
        assert abs(market.total_budget() - 1.0) <= 1e-9


class TestSelectSigma:
    def test_sigma_formula(self):
        # responses all equal 2 -> rms 2; alpha 0.5 -> sigma 1.0
        rng = np.random.default_rng(14)
        X = rng.uniform(size=(40, 3))
        data = Dataset(X, np.full(40, 2.0), (2.0, 2.0), "const")
        sel = select_sigma(data, ForestParams(trees=2, pool_size=20, seed=0),
                           rng=np.random.default_rng(0), alpha_grid=[0.5],
                           epochs=1)
        assert sel.sigma == pytest.approx(1.0, abs=1e-12)
        assert sel.alpha == 0.5

    def test_single_alpha_returned_directly(self):
        data = generate_friedman(1, 60, np.random.default_rng(15))
        sel = select_sigma(data, ForestParams(trees=2, pool_size=20, seed=0),
                           rng=np.random.default_rng(1), alpha_grid=[0.3],
                           epochs=1)
        rms = float(np.sqrt(np.mean(data.response ** 2)))
        assert sel.sigma == pytest.approx(0.3 * rms, rel=1e-12)

    def test_deterministic(self):
        data = generate_friedman(1, 80, np.random.default_rng(16))
        kwargs = dict(alpha_grid=[0.2, 0.5, 1.0], epochs=2)
        a = select_sigma(data, ForestParams(trees=3, pool_size=30, seed=0),
                         rng=np.random.default_rng(7), **kwargs)
        b = select_sigma(data, ForestParams(trees=3, pool_size=30, seed=0),
                         rng=np.random.default_rng(7), **kwargs)
        assert a.sigma == b.sigma
        np.testing.assert_array_equal(a.cv_mse, b.cv_mse)
        assert a.sigma > 0

    def test_degenerate_all_zero_response(self):
        X = np.random.default_rng(17).uniform(size=(30, 2))
        data = Dataset(X, np.zeros(30), (0.0, 0.0), "zeros")
        sel = select_sigma(data, ForestParams(trees=2, pool_size=10, seed=0),
                           rng=np.random.default_rng(2))
        assert sel.sigma > 0

    def test_grid_validation(self):
        data = generate_friedman(1, 40, np.random.default_rng(18))
        params = ForestParams(trees=2, pool_size=10, seed=0)
        with pytest.raises(ValueError):
            select_sigma(data, params, rng=np.random.default_rng(0),
                         alpha_grid=[])
        with pytest.raises(ValueError):
            select_sigma(data, params, rng=np.random.default_rng(0),
                         alpha_grid=[0.0, 0.5])
        with pytest.raises(ValueError):
            select_sigma(data, params, rng=np.random.default_rng(0),
                         alpha_grid=[0.5, 1.5])


class TestMarketPersistence:
    def test_round_trip(self, tmp_path):
        train, test = random_split(
            generate_friedman(1, 120, np.random.default_rng(19)), 0.2,
            np.random.default_rng(19))
        forest = grow_forest(train, ForestParams(trees=4, pool_size=40, seed=9))
        market = init_market(forest, None, 10.0 / train.num_rows,
                             GaussianKernel(0.9, hermite_gauss(5)))
        train_epochs(market, train, test, epochs=2)
        path = tmp_path / "market.npz"
        save_market(market, path)
        again = load_market(path, forest)
        np.testing.assert_array_equal(again.budgets, market.budgets)
        assert again.eta == market.eta
        assert isinstance(again.kernel, GaussianKernel)
        assert again.kernel.sigma == market.kernel.sigma
        np.testing.assert_array_equal(again.predict(test.features),
                                      market.predict(test.features))

    def test_rejects_wrong_forest(self, tmp_path):
        data = generate_friedman(1, 80, np.random.default_rng(20))
        forest = grow_forest(data, ForestParams(trees=3, pool_size=30, seed=10))
        other = grow_forest(data, ForestParams(trees=3, pool_size=30, seed=11))
        market = init_market(forest, None, 0.1, DeltaKernel())
        path = tmp_path / "market.npz"
        save_market(market, path)
        with pytest.raises(ValueError, match="different forest"):
            load_market(path, other)
