import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotfusion.calibration import CalibrationRow
from rotfusion.validation import cluster_bootstrap
from rotfusion.validation.bootstrap import resample_counts
from rotfusion.validation.loocv import (TABLE_VARIANTS, ModelVariant, haversine_km,
                                        loo_site_cv, observed_site_means, read_sites,
                                        table_report, weighted_split_report)

from oracles import brute_ols

SITES = {"A": (42.0, -93.0), "B": (42.1, -93.1), "C": (44.0, -90.0), "D": (40.0, -88.0)}


def linear_rows(sites=("A", "B", "C"), years=(2001, 2002, 2003), noise=None):
    rows = []
    k = 0
    for i, s in enumerate(sites):
        for t in years:
            for j in (1, 2):
                sat = 0.1 * i + 0.05 * (t - 2000) + 0.03 * j + 0.011 * k
                exp = 0.5 + 2 * sat + (noise[k] if noise is not None else 0.0)
                weather = (100 + 7 * k % 13, 300 + 3 * i, 2500 + 11 * t % 17, 30 + j)
                rows.append(CalibrationRow(s, t, j, exp, sat, (i + j) % 2, weather))
                k += 1
    return rows


def noisy_rows(seed, n_sites=6):
    rng = np.random.default_rng(seed)
    sites = tuple("ABCDEFGH"[:n_sites])
    return linear_rows(sites, (2001, 2002, 2003, 2004), noise=rng.normal(0, 0.3, n_sites * 8))


class TestLoocv:
    def test_noise_free_hybrid_zero_rmse(self):
        rep = loo_site_cv(linear_rows(), ModelVariant("hybrid_calibration"))
        assert rep.rmse == pytest.approx(0.0, abs=1e-8)
        assert len(rep.per_site) == 3 and not rep.fold_errors

    def test_forced_identity_equals_satellite_only(self):
        rows = noisy_rows(1)
        forced = loo_site_cv(rows, ModelVariant("hybrid_calibration"), forced_coefficients=(0.0, 1.0))
        sat = loo_site_cv(rows, ModelVariant("satellite_only"))
        assert [p.sq_error for p in forced.per_site] == [p.sq_error for p in sat.per_site]

    def test_satellite_only_hand_values(self):
        rows = [CalibrationRow("A", 2001, 1, 1.0, 0.5), CalibrationRow("A", 2002, 1, 2.0, 0.5),
                CalibrationRow("A", 2002, 2, 4.0, 1.5),
                CalibrationRow("B", 2001, 1, 0.0, 0.0), CalibrationRow("C", 2001, 1, 1.0, 1.0)]
        rep = loo_site_cv(rows, ModelVariant("satellite_only"))
        a = rep.per_site[0]
        # observed: mean(1.0, mean(2.0, 4.0)) = 2.0; predicted: mean(0.5, mean(0.5, 1.5)) = 0.75
        assert (a.observed, a.predicted) == (2.0, 0.75)
        assert a.sq_error == 1.5625 and a.n_years == 2
        assert rep.rmse == pytest.approx(math.sqrt(1.5625 / 3))

    def test_observed_means_over_years(self):
        rows = [CalibrationRow("A", 2001, 1, 1.0, 0), CalibrationRow("A", 2001, 2, 3.0, 0),
                CalibrationRow("A", 2002, 1, 5.0, 0)]
        assert observed_site_means(rows) == {"A": 3.5}

    def test_nearest_experiment(self):
        rows = linear_rows(("A", "B", "C", "D"))
        rep = loo_site_cv(rows, ModelVariant("nearest_experiment"), sites=SITES)
        obs = observed_site_means(rows)
        pred = {p.site: p.predicted for p in rep.per_site}
        assert pred["A"] == obs["B"] and pred["B"] == obs["A"]
        # C (44, -90) is closer to A/B than to D (40, -88); ties go to the lower id
        assert pred["C"] == obs["B"]
        with pytest.raises(ValueError, match="coordinates"):
            loo_site_cv(rows, ModelVariant("nearest_experiment"), sites={"A": (0, 0)})

    def test_haversine(self):
        assert haversine_km(0, 0, 0, 1) == pytest.approx(2 * math.pi * 6371.0088 / 360)
        assert haversine_km(10, 20, 10, 20) == 0.0

    def test_linear_mode_is_ols(self):
        rows = noisy_rows(2)
        rep = loo_site_cv(rows, ModelVariant("hybrid_calibration", "linear"))
        held = rep.per_site[0]
        train = [r for r in rows if r.site != held.site]
        slope, intercept = brute_ols([r.sat_effect for r in train], [r.exp_effect for r in train])
        test = [r for r in rows if r.site == held.site]
        by_year = {}
        for r in test:
            by_year.setdefault(r.year, []).append(intercept + slope * r.sat_effect)
        expected = np.mean([np.mean(v) for v in by_year.values()])
        assert held.predicted == pytest.approx(expected, abs=1e-10)

    def test_all_other_is_intercept_only(self):
        rows = noisy_rows(3)
        rep = loo_site_cv(rows, ModelVariant("all_other_experiments", "linear"))
        held = rep.per_site[0]
        train = [r.exp_effect for r in rows if r.site != held.site]
        assert held.predicted == pytest.approx(np.mean(train), abs=1e-12)

    @pytest.mark.parametrize("name", TABLE_VARIANTS)
    @pytest.mark.parametrize("mode", ["mixed", "linear", "mixed_with_tillage"])
    def test_every_cell_runs(self, name, mode):
        rep = loo_site_cv(noisy_rows(4), ModelVariant.parse(name, mode), sites=SITES | {
            "E": (41, -91), "F": (43, -95)})
        assert len(rep.per_site) + len(rep.fold_errors) == 6
        assert math.isfinite(rep.rmse)

    def test_unfittable_fold_is_recorded(self, caplog):
        # all_four_weather needs 5 coefficients; each fold trains on 2 x 2 rows
        rows = [CalibrationRow(s, 2001 + t, 1, float(t), 0.1 * t, 1, (1.0 * t, 2.0, 3.0, 4.0))
                for s in "ABC" for t in range(2)]
        rep = loo_site_cv(rows, ModelVariant("all_four_weather", "linear"))
        assert set(rep.fold_errors) == {"A", "B", "C"} and rep.per_site == []
        assert math.isnan(rep.rmse)
        assert "excluded" in caplog.text

    def test_needs_three_sites(self):
        with pytest.raises(ValueError):
            loo_site_cv(linear_rows(("A", "B")), ModelVariant("satellite_only"))

    def test_fold_order_independence(self, rng):
        rows = noisy_rows(5)
        shuffled = [rows[i] for i in rng.permutation(len(rows))]
        for mode in ("mixed", "linear"):
            v = ModelVariant("hybrid_calibration", mode)
            a = {p.site: p.predicted for p in loo_site_cv(rows, v).per_site}
            b = {p.site: p.predicted for p in loo_site_cv(shuffled, v).per_site}
            assert a == b

    def test_year_blups_option_covers_every_fold(self):
        rows = noisy_rows(6)
        v = ModelVariant("hybrid_calibration")
        plain = loo_site_cv(rows, v)
        blup = loo_site_cv(rows, v, year_blups=True)
        assert len(plain.per_site) == len(blup.per_site)

    def test_variant_validation(self):
        with pytest.raises(ValueError):
            ModelVariant("single_weather", covariate="rain")
        with pytest.raises(ValueError):
            ModelVariant("satellite_only", covariate="gdd")
        assert ModelVariant.parse("gdd").kind == "single_weather"


class TestSplit:
    def test_all_short_term(self):
        rep = loo_site_cv(linear_rows(), ModelVariant("satellite_only"))
        long, short = weighted_split_report(rep)
        assert long is None and short == pytest.approx(rep.rmse)

    def test_partition_by_duration(self):
        rows = [CalibrationRow(s, 2001, 1, 1.0, 1.0 + d) for s, d in
                [("A", 1.0), ("B", 1.0), ("C", 2.0), ("D", 0.5)]]
        rep = loo_site_cv(rows, ModelVariant("satellite_only"),
                          site_years={"A": 15, "B": 15, "C": 4, "D": 10})
        long, short = weighted_split_report(rep)
        assert long == pytest.approx(1.0) and short == pytest.approx(2.0)

    def test_equal_errors(self):
        rows = [CalibrationRow(s, 2001, 1, 1.0, 1.5) for s in "ABCD"]
        rep = loo_site_cv(rows, ModelVariant("satellite_only"),
                          site_years={"A": 15, "B": 14, "C": 4, "D": 5})
        assert weighted_split_report(rep) == (pytest.approx(rep.rmse), pytest.approx(rep.rmse))


def test_table_report_layout():
    rows = noisy_rows(7)
    rep = table_report(rows, sites=SITES | {"E": (41, -91), "F": (43, -95)},
                       modes=("mixed", "linear"))
    assert rep["columns"] == list(TABLE_VARIANTS) and rep["rows"] == ["mixed", "linear"]
    # unfitted variants are the same in every mode
    assert rep["rmse"]["mixed"]["satellite_only"] == rep["rmse"]["linear"]["satellite_only"]
    assert rep["rmse"]["mixed"]["hybrid_calibration"]["n_sites"] == 6


def test_read_sites(tmp_path):
    p = tmp_path / "sites.csv"
    p.write_text("site,lat,lon\nA,42.5,-93.25\nB,x,1\n")
    with pytest.raises(ValueError, match="line 3"):
        read_sites(p)
    p.write_text("site,lat,lon\nA,42.5,-93.25\n")
    assert read_sites(p) == {"A": (42.5, -93.25)}


class TestBootstrap:
    def data(self, seed=0, g=8):
        rng = np.random.default_rng(seed)
        clusters = np.repeat(np.arange(g), 5)
        x = rng.normal(size=len(clusters))
        y = 0.5 + 1.5 * x + rng.normal(size=len(clusters))
        return clusters, {"x": x, "y": y, "effect": y}

    def test_single_cluster(self):
        c, d = self.data()
        res = cluster_bootstrap(np.zeros(len(c)), d, "ols_slope", B=50, seed=1)
        assert res.ci_low == res.ci_high == pytest.approx(res.estimate)
        assert np.all(res.replicates == res.replicates[0])

    def test_determinism(self):
        c, d = self.data()
        a = cluster_bootstrap(c, d, "pearson_correlation", B=300, seed=9)
        b = cluster_bootstrap(c, d, "pearson_correlation", B=300, seed=9)
        assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)
        other = cluster_bootstrap(c, d, "pearson_correlation", B=300, seed=10)
        assert (a.ci_low, a.ci_high) != (other.ci_low, other.ci_high)

    def test_prefix_stability(self):
        # replicate r depends only on (seed, r)
        assert np.array_equal(resample_counts(6, 20, 3)[:10], resample_counts(6, 10, 3))

    @pytest.mark.parametrize("name,fn", [
        ("pearson_correlation", lambda d: np.corrcoef(d["x"], d["y"])[0, 1]),
        ("ols_slope", lambda d: brute_ols(list(d["x"]), list(d["y"]))[0]),
        ("mean", lambda d: np.mean(d["effect"])),
        ("fraction_positive", lambda d: np.mean(d["effect"] > 0)),
    ])
    def test_named_statistics_match_row_resampling(self, name, fn):
        c, d = self.data(seed=2)
        fast = cluster_bootstrap(c, d, name, B=100, seed=4)
        slow = cluster_bootstrap(c, d, fn, B=100, seed=4)
        assert fast.estimate == pytest.approx(slow.estimate, abs=1e-10)
        assert np.allclose(fast.replicates, slow.replicates, atol=1e-10)

    def test_fraction_positive_all_positive(self):
        c = np.repeat(np.arange(4), 3)
        res = cluster_bootstrap(c, {"effect": np.linspace(0.1, 2, 12)}, "fraction_positive",
                                B=100)
        assert res.estimate == 1.0 and (res.ci_low, res.ci_high) == (1.0, 1.0)
        assert res.one_sided

    def test_undefined_replicates_skipped(self):
        # cluster 0 has constant x; a replicate drawing only cluster 0 has no slope
        c = np.array([0, 0, 1, 1])
        d = {"x": np.array([1.0, 1.0, 0.0, 2.0]), "y": np.array([1.0, 2.0, 0.0, 4.0])}
        res = cluster_bootstrap(c, d, "ols_slope", B=400, seed=0)
        assert 0 < res.n_skipped < 400
        assert len(res.replicates) == 400 - res.n_skipped

    def test_unknown_statistic(self):
        c, d = self.data()
        with pytest.raises(ValueError):
            cluster_bootstrap(c, d, "median", B=10)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=30), st.integers(0, 2 ** 32))
    def test_fraction_positive_in_unit_interval(self, effects, seed):
        c = np.arange(len(effects)) % 3
        res = cluster_bootstrap(c, {"effect": np.array(effects)}, "fraction_positive",
                                B=30, seed=seed)
        assert 0 <= res.estimate <= 1
        assert np.all((res.replicates >= 0) & (res.replicates <= 1))
        assert 0 <= res.ci_low <= res.ci_high == 1.0
