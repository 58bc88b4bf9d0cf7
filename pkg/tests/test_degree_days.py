import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotfusion.degree_days import (DailyTemperature, SeasonWindow, daily_contribution,
                                   hourly_temperatures, load_weather, precip_window_sum,
                                   season_features, seasonal_degree_days)

from oracles import sine_day_fine

temps = st.floats(-30, 50, allow_nan=False)


def ordered(a, b):
    return (a, b) if a <= b else (b, a)


def days_from(start, n, tmin, tmax):
    return [DailyTemperature(start + dt.timedelta(days=k), tmin, tmax) for k in range(n)]


class TestDailyContribution:
    def test_constant_at_lower_threshold(self):
        assert daily_contribution(8, 8) == (0.0, 0.0)

    def test_constant_at_upper_threshold(self):
        assert daily_contribution(30, 30) == (22.0, 0.0)

    def test_twenty_forty_matches_fine_integration(self):
        gdd, edd = daily_contribution(20, 40)
        # closed form of the continuous curve: edd = 10/pi, gdd = 22 - 10/pi
        ref_g, ref_e = sine_day_fine(20, 40)
        assert ref_e == pytest.approx(10 / math.pi, abs=1e-6)
        assert ref_g == pytest.approx(22 - 10 / math.pi, abs=1e-6)
        assert abs(gdd - ref_g) < 0.05 and abs(edd - ref_e) < 0.05

    def test_tmin_above_tmax_rejected(self):
        with pytest.raises(ValueError):
            daily_contribution(10, 5)
        with pytest.raises(ValueError):
            DailyTemperature(dt.date(2020, 1, 1), 10, 5)

    def test_vectorized_matches_scalar(self, rng):
        a = rng.uniform(-30, 50, 20)
        b = a + rng.uniform(0, 20, 20)
        g, e = daily_contribution(a, b)
        for k in range(20):
            assert (g[k], e[k]) == daily_contribution(a[k], b[k])

    def test_hourly_curve_shape(self):
        T = hourly_temperatures(10, 20)
        assert T.shape == (24,)
        assert T.mean() == pytest.approx(15.0)
        assert T.min() >= 10 and T.max() <= 20

    @settings(max_examples=200, deadline=None)
    @given(temps, temps)
    def test_convergence_to_1440_steps(self, a, b):
        lo, hi = ordered(a, b)
        g, e = daily_contribution(lo, hi)
        rg, re_ = sine_day_fine(lo, hi, steps=1440)
        assert abs(g - rg) < 0.05 and abs(e - re_) < 0.05

    @settings(max_examples=200, deadline=None)
    @given(temps, temps)
    def test_thresholds(self, a, b):
        lo, hi = ordered(a, b)
        g, e = daily_contribution(lo, hi)
        if hi <= 8:
            assert g == 0 and e == 0
        if hi <= 30:
            assert e == 0
        assert g >= 0 and e >= 0

    @settings(max_examples=200, deadline=None)
    @given(temps, temps, st.floats(0, 20))
    def test_monotone(self, a, b, bump):
        lo, hi = ordered(a, b)
        g0, e0 = daily_contribution(lo, hi)
        g1, e1 = daily_contribution(lo, hi + bump)
        assert g1 + e1 >= g0 + e0 - 1e-12
        assert e1 >= e0 - 1e-12
        lo2 = min(lo + bump, hi)
        g2, e2 = daily_contribution(lo2, hi)
        assert g2 + e2 >= g0 + e0 - 1e-12

    @settings(max_examples=200, deadline=None)
    @given(temps, temps)
    def test_decomposition_identity(self, a, b):
        lo, hi = ordered(a, b)
        g, e = daily_contribution(lo, hi)
        h = np.arange(24) + 0.25
        T = (hi + lo) / 2 + (hi - lo) / 2 * np.sin(2 * np.pi * h / 24)
        assert g + e == pytest.approx(float(np.sum(np.maximum(T - 8, 0)) / 24), abs=1e-12)


class TestSeasonal:
    def test_three_days_at_eight(self):
        days = days_from(dt.date(2020, 4, 1), 3, 8, 8)
        assert seasonal_degree_days(days, SeasonWindow(dt.date(2020, 4, 1),
                                                       dt.date(2020, 4, 3))) == (0.0, 0.0)

    def test_additivity(self):
        days = days_from(dt.date(2020, 4, 1), 2, 30, 30)
        assert seasonal_degree_days(days, SeasonWindow(dt.date(2020, 4, 1),
                                                       dt.date(2020, 4, 2))) == (44.0, 0.0)

    def test_default_window_matches_loop(self, rng):
        start = dt.date(2019, 4, 1)
        series = []
        for k in range(183):
            lo = float(rng.uniform(-5, 25))
            series.append(DailyTemperature(start + dt.timedelta(days=k), lo,
                                           lo + float(rng.uniform(0, 18))))
        assert series[-1].date == dt.date(2019, 9, 30)
        gdd = edd = 0.0
        for d in series:
            g, e = daily_contribution(d.tmin, d.tmax)
            gdd += g
            edd += e
        got = seasonal_degree_days(series)
        assert got[0] == pytest.approx(gdd, rel=1e-12)
        assert got[1] == pytest.approx(edd, rel=1e-12, abs=1e-12)

    def test_gap_names_first_missing_date(self):
        days = days_from(dt.date(2020, 4, 1), 5, 10, 20)
        del days[2]
        with pytest.raises(ValueError, match="2020-04-03"):
            seasonal_degree_days(days, SeasonWindow(dt.date(2020, 4, 1), dt.date(2020, 4, 5)))

    def test_duplicate_date(self):
        days = days_from(dt.date(2020, 4, 1), 3, 10, 20)
        days.append(days[0])
        with pytest.raises(ValueError, match="duplicate"):
            seasonal_degree_days(days, SeasonWindow(dt.date(2020, 4, 1), dt.date(2020, 4, 3)))

    def test_leap_day_counted(self):
        w = SeasonWindow.early_season(2020)
        assert len(w.dates()) == 121
        assert len(SeasonWindow.early_season(2019).dates()) == 120

    def test_inverted_window(self):
        with pytest.raises(ValueError):
            SeasonWindow(dt.date(2020, 5, 1), dt.date(2020, 4, 1))


class TestPrecip:
    def test_zeros(self):
        w = SeasonWindow.early_season(2019)
        assert precip_window_sum([(d, 0.0) for d in w.dates()], w) == 0.0

    def test_single_day(self):
        w = SeasonWindow(dt.date(2019, 5, 1), dt.date(2019, 5, 1))
        assert precip_window_sum([(dt.date(2019, 4, 30), 3.0), (dt.date(2019, 5, 1), 10.0)], w) == 10.0

    def test_random_days_sorted_accumulation(self, rng):
        w = SeasonWindow.early_season(2019)
        series = [(d, float(v)) for d, v in zip(w.dates(), rng.gamma(1.0, 4.0, 120))]
        shuffled = [series[i] for i in rng.permutation(len(series))]
        total = 0.0
        for _, v in sorted(series):
            total += v
        assert precip_window_sum(shuffled, w) == pytest.approx(total, rel=1e-12)

    def test_negative_rejected(self):
        w = SeasonWindow(dt.date(2019, 5, 1), dt.date(2019, 5, 2))
        with pytest.raises(ValueError, match="2019-05-02"):
            precip_window_sum([(dt.date(2019, 5, 1), 1.0), (dt.date(2019, 5, 2), -1.0)], w)

    def test_gap_rejected(self):
        w = SeasonWindow(dt.date(2019, 5, 1), dt.date(2019, 5, 2))
        with pytest.raises(ValueError, match="missing"):
            precip_window_sum([(dt.date(2019, 5, 1), 1.0)], w)


def test_weather_file_features(tmp_path):
    path = tmp_path / "w.csv"
    lines = ["date,tmin_c,tmax_c,precip_mm"]
    d = dt.date(2018, 1, 1)
    while d.year == 2018:
        lines.append(f"{d.isoformat()},30,30,2.5")
        d += dt.timedelta(days=1)
    path.write_text("\n".join(lines) + "\n")
    feats = season_features(load_weather(path), 2018)
    assert feats["gdd"] == pytest.approx(22.0 * 183)
    assert feats["edd"] == 0.0
    assert feats["early_precip"] == pytest.approx(2.5 * 120)
    assert feats["growing_precip"] == pytest.approx(2.5 * 138)


def test_weather_file_missing_column(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("date,tmin_c,tmax_c\n2018-01-01,1,2\n")
    with pytest.raises(ValueError, match="precip_mm"):
        load_weather(path)
