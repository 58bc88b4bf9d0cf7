import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotfusion.forest import (ForestConfig, NoOverlapError, fit_causal_forest,
                              fit_regression_forest, trim_by_propensity)
from rotfusion.forest._ensemble import grow_ensemble
from rotfusion.forest.io import load_model, save_model

P = 4


def randomized(n, tau, seed, noise=0.5, p=P):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    w = rng.integers(0, 2, n)
    y = 5 + X[:, 1] + w * tau(X) + noise * rng.normal(size=n)
    return X, w, y


def walk(ens, t, x):
    """Leaf node reached by x in tree t, by direct traversal of the packed arrays."""
    off = ens.node_off[t]
    node = 0
    while ens.left[off + node] >= 0:
        f = ens.feature[off + node]
        node = ens.left[off + node] if x[f] <= ens.threshold[off + node] else ens.right[off + node]
    return off + node


@pytest.fixture(scope="module")
def noise_free():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(10_000, P))
    w = rng.integers(0, 2, 10_000)
    y = w * 2.0
    return X, w, y, fit_causal_forest(X, w, y, ForestConfig(n_trees=100, seed=7))


@pytest.fixture(scope="module")
def constant_effect():
    X, w, y = randomized(4000, lambda X: 1.5, seed=1)
    return X, w, y, fit_causal_forest(X, w, y, ForestConfig(n_trees=200, seed=3))


class TestRegressionForest:
    def test_constant_target(self, rng):
        X = rng.normal(size=(200, 3))
        f = fit_regression_forest(X, np.full(200, 2.5), ForestConfig(n_trees=20))
        assert np.allclose(f.predict(rng.normal(size=(30, 3))), 2.5)
        assert np.allclose(f.oob_prediction, 2.5)

    def test_step_function_oob(self, rng):
        X = rng.uniform(-1, 1, size=(2000, 3))
        truth = np.where(X[:, 0] > 0, 4.0, 1.0)
        f = fit_regression_forest(X, truth, ForestConfig(n_trees=100, seed=2))
        rmse = np.sqrt(np.mean((f.oob_prediction - truth) ** 2))
        assert rmse < 0.2 * 3.0

    def test_too_few_samples(self, rng):
        cfg = ForestConfig(min_leaf=5)
        with pytest.raises(ValueError):
            fit_regression_forest(rng.normal(size=(4, 2)), np.zeros(4), cfg)

    def test_missing_covariate_rejected(self, rng):
        X = rng.normal(size=(50, 2))
        X[3, 1] = np.nan
        with pytest.raises(ValueError):
            fit_regression_forest(X, np.zeros(50), ForestConfig(n_trees=5))


class TestCausalForest:
    def test_null_effect_noise_free(self, rng):
        X = rng.normal(size=(400, P))
        w = rng.integers(0, 2, 400)
        model = fit_causal_forest(X, w, np.full(400, 5.0), ForestConfig(n_trees=50))
        assert np.all(model.predict_tau(rng.normal(size=(50, P))) == 0.0)

    def test_null_effect_with_noise(self):
        X, w, y = randomized(3000, lambda X: 0.0, seed=4)
        model = fit_causal_forest(X, w, y, ForestConfig(n_trees=200, seed=1))
        tau = model.predict_tau(np.random.default_rng(5).normal(size=(50, P)))
        assert np.all(np.abs(tau) <= 0.05 * 5)
        assert abs(tau.mean()) < 0.05

    def test_constant_effect_noise_free(self, noise_free):
        X, w, y, model = noise_free
        dim = y[w == 1].mean() - y[w == 0].mean()
        assert abs(model.oob_tau().mean() - dim) <= 0.05 * dim

    def test_constant_effect_random_points(self, noise_free):
        *_, model = noise_free
        tau = model.predict_tau(np.random.default_rng(8).normal(size=(100, P)))
        assert np.all(np.abs(tau - 2.0) <= 0.1 * 2.0)

    def test_two_strata(self):
        X, w, y = randomized(20_000, lambda X: np.where(X[:, 0] > 0, 2.0, 0.5), seed=9)
        model = fit_causal_forest(X, w, y, ForestConfig(n_trees=200, seed=10))
        tau = model.oob_tau()
        for mask in (X[:, 0] > 0, X[:, 0] <= 0):
            dim = y[mask & (w == 1)].mean() - y[mask & (w == 0)].mean()
            assert abs(tau[mask].mean() - dim) <= 0.1 * abs(dim)

    def test_extrapolation_finite_and_flagged(self, constant_effect):
        X, *_, model = constant_effect
        far = 3 * np.abs(X).max(axis=0)[None, :]
        assert np.isfinite(model.predict_tau(far)).all()
        assert model.extrapolation_flags(far).tolist() == [True]
        assert model.extrapolation_flags(X[:5]).tolist() == [False] * 5

    def test_single_arm_rejected(self, rng):
        X = rng.normal(size=(100, P))
        with pytest.raises(ValueError, match="arms"):
            fit_causal_forest(X, np.ones(100, int), rng.normal(size=100))

    def test_non_binary_rejected(self, rng):
        with pytest.raises(ValueError, match="binary"):
            fit_causal_forest(rng.normal(size=(100, P)), np.full(100, 2), rng.normal(size=100))

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError, match="min_leaf"):
            fit_causal_forest(rng.normal(size=(19, P)), np.arange(19) % 2, rng.normal(size=19))

    def test_degenerate_subsample_skips_tree(self, caplog):
        # W~ is nonzero on one row only, so most subsamples carry no treatment variation
        rng = np.random.default_rng(11)
        n = 40
        X = rng.normal(size=(n, 2))
        w_res = np.zeros(n)
        w_res[0] = 0.5
        arm = (w_res > 0).astype(np.int8)
        cfg = ForestConfig(n_trees=50, min_leaf=1, subsample_fraction=0.2)
        with caplog.at_level(logging.WARNING):
            ens = grow_ensemble(X, rng.normal(size=n), w_res, arm, cfg, causal=True, stream=3)
        assert 0 < ens.n_trees < 50
        assert any("skipped" in r.getMessage() for r in caplog.records)
        with pytest.raises(ValueError, match="every subsample"):
            grow_ensemble(X, rng.normal(size=n), np.zeros(n), arm, cfg, causal=True, stream=3)

    def test_no_overlap_error(self, constant_effect):
        *_, model = constant_effect
        with pytest.raises(NoOverlapError):
            model._ratio(np.ones(2), np.array([1.0, 0.0]))

    def test_ate_and_se(self, constant_effect):
        *_, model = constant_effect
        ate, se = model.average_treatment_effect()
        assert 0 < se < 0.1 and abs(ate - 1.5) < 3 * se + 0.02


class TestPropensity:
    def test_balanced(self, constant_effect):
        *_, model = constant_effect
        e = model.predict_propensity(np.random.default_rng(12).normal(size=(50, P)))
        assert np.all(np.abs(e - 0.5) <= 0.05 * 2)
        assert abs(e.mean() - 0.5) <= 0.05

    def test_separable(self, rng):
        X = rng.normal(size=(2000, P))
        w = (X[:, 0] > 0).astype(int)
        y = rng.normal(size=2000)
        model = fit_causal_forest(X, w, y, ForestConfig(n_trees=100))
        pts = rng.normal(size=(200, P))
        pts[:, 0] = np.abs(pts[:, 0]) + 0.2
        assert np.all(model.predict_propensity(pts) > 0.9)

    def test_single_tree_pure_leaf(self, rng):
        X = rng.normal(size=(300, 2))
        w = (X[:, 0] > 0.3).astype(float)
        f = fit_regression_forest(X, w, ForestConfig(n_trees=1, min_leaf=3, mtry=2))
        ens = f.ensemble
        for i in range(0, 300, 17):
            leaf = walk(ens, 0, X[i])
            members = ens.global_est(0)[ens.est_lo[leaf]:ens.est_hi[leaf]]
            assert f.predict(X[i:i + 1])[0] == pytest.approx(w[members].mean())

    def test_clamped(self, constant_effect):
        *_, model = constant_effect
        e = model.predict_propensity(np.random.default_rng(13).normal(size=(200, P)) * 5)
        assert np.all((0 <= e) & (e <= 1))


class TestTrimming:
    def test_examples(self):
        assert trim_by_propensity([0.5, 0.95, 0.89], 0.9).keep.tolist() == [0, 2]
        assert trim_by_propensity([0.5] * 4).keep.tolist() == [0, 1, 2, 3]
        r = trim_by_propensity([0.05, 0.5], 0.9)
        assert r.keep.tolist() == [1] and (r.n_dropped_high, r.n_dropped_low) == (0, 1)

    @pytest.mark.parametrize("t", [0.5, 0.3, 1.2])
    def test_bad_threshold(self, t):
        with pytest.raises(ValueError):
            trim_by_propensity([0.5], t)

    def test_bad_scores(self):
        with pytest.raises(ValueError):
            trim_by_propensity([0.5, 1.2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), max_size=50), st.floats(0.51, 1.0))
    def test_partition(self, scores, t):
        r = trim_by_propensity(scores, t)
        s = np.asarray(scores)
        assert len(r.keep) + r.n_dropped == len(scores)
        assert np.all((s[r.keep] < t) & (s[r.keep] > 1 - t))


class TestInvariants:
    def test_determinism_and_threads(self):
        X, w, y = randomized(1500, lambda X: 1.0 + X[:, 0], seed=14)
        cfg = ForestConfig(n_trees=60, seed=99)
        a = fit_causal_forest(X, w, y, cfg, threads=1)
        b = fit_causal_forest(X, w, y, cfg, threads=1)
        c = fit_causal_forest(X, w, y, cfg, threads=4)
        pts = np.random.default_rng(15).normal(size=(40, P))
        ta = a.predict_tau(pts)
        assert np.array_equal(ta, b.predict_tau(pts))
        assert np.array_equal(ta, c.predict_tau(pts))
        assert np.array_equal(a.oob_tau(), c.oob_tau())
        assert np.array_equal(a.predict_propensity(pts), c.predict_propensity(pts))

    def test_seed_sensitivity(self, constant_effect):
        X, w, y, model = constant_effect
        other = fit_causal_forest(X, w, y, ForestConfig(n_trees=200, seed=4))
        assert abs(model.oob_tau().mean() - other.oob_tau().mean()) < 0.05 * 1.5

    def test_unconfoundedness_recovery(self):
        err = {}
        # eight replications so sampling noise does not mask the 1/sqrt(n) trend
        for n in (2000, 10_000):
            errs = []
            for s in range(8):
                X, w, y = randomized(n, lambda X: 1.0 + 0.5 * X[:, 0], seed=100 + s, noise=1.0)
                model = fit_causal_forest(X, w, y, ForestConfig(n_trees=100, seed=s))
                errs.append(abs(model.oob_tau().mean() - 1.0))
            err[n] = np.mean(errs)
        assert err[10_000] < err[2000]

    def test_attenuation_monotone(self):
        rng = np.random.default_rng(16)
        n = 4000
        X = rng.normal(size=(n, P))
        w = rng.integers(0, 2, n)
        y = 5 + X[:, 1] + 2.0 * w + 0.5 * rng.normal(size=n)
        u = rng.uniform(size=n)
        means = []
        for eps in (0.0, 0.1, 0.2, 0.3):
            observed = np.where(u < eps, 1 - w, w)
            model = fit_causal_forest(X, observed, y, ForestConfig(n_trees=100, seed=1))
            means.append(model.oob_tau().mean())
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_weight_validity(self, constant_effect):
        X, *_, model = constant_effect
        for x in np.random.default_rng(17).normal(size=(5, P)):
            alpha = model.neighborhood_weights(x)
            assert alpha.shape == (len(X),)
            assert np.all(alpha >= 0) and alpha.sum() == pytest.approx(1.0, abs=1e-12)
            # the weights reproduce the ratio estimator
            num = np.sum(alpha * model.w_resid * model.y_resid)
            den = np.sum(alpha * model.w_resid ** 2)
            assert model.predict_tau(x)[0] == pytest.approx(num / den, rel=1e-9)


def test_model_file_round_trip(tmp_path, constant_effect):
    X, *_, model = constant_effect
    a, b = tmp_path / "a.rfm", tmp_path / "b.rfm"
    save_model(a, model, {"crop": "corn"})
    save_model(b, model, {"crop": "corn"})
    assert a.read_bytes() == b.read_bytes()
    back, meta = load_model(a)
    assert meta["metadata"]["crop"] == "corn" and back.config == model.config
    pts = X[:20]
    assert np.array_equal(back.predict_tau(pts), model.predict_tau(pts))
    assert np.array_equal(back.predict_propensity(pts), model.predict_propensity(pts))
    assert np.array_equal(back.oob_tau(), model.oob_tau())


def test_config_validation():
    for bad in ({"min_leaf": 0}, {"honesty_fraction": 1.0}, {"subsample_fraction": 0},
                {"n_trees": 0}):
        with pytest.raises(ValueError):
            ForestConfig(**bad)
    assert ForestConfig().mtry == 4
