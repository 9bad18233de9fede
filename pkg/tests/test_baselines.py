"""Tests for the historical-average and seasonal-naive baselines."""

import unittest

import numpy as np
import pytest

from traffic_forecaster.baselines import (
    baseline_metrics,
    baseline_predictions,
    ha_fit,
    ha_predict,
    seasonal_naive_predict,
)
from traffic_forecaster.errors import EmptyDatasetError, OutOfRangeError

from .factories import make_series

WEEK = 168  # hourly slots


def weekly_periodic(rng, n=3, weeks=3):
    pattern = rng.uniform(10, 100, (n, WEEK))
    return make_series(np.tile(pattern, weeks))


class TestHistoricalAverage(unittest.TestCase):
    """Test fitting and predicting the slot means."""

    def setUp(self):
        values = np.full((1, 2 * WEEK), np.nan)
        values[0, 8] = 5.0  # first Monday 08:00
        values[0, WEEK + 8] = 7.0  # second Monday 08:00
        values[0, 20] = 12.0
        self.state = ha_fit(make_series(values))

    def test_slot_mean(self):
        self.assertEqual(ha_predict(self.state, 8)[0, 0], 6.0)
        self.assertEqual(self.state.counts[0, 8], 2)

    def test_unseen_slot_uses_node_mean(self):
        self.assertEqual(ha_predict(self.state, 9)[0, 0], 8.0)

    def test_timestamp_target(self):
        self.assertEqual(ha_predict(self.state, "2024-01-22 08:00")[0, 0], 6.0)
        self.assertEqual(ha_predict(self.state, "2024-01-01 20:00")[0, 0], 12.0)

    def test_periodic_in_target(self):
        for t in (3, 8, 20, 100):
            np.testing.assert_array_equal(
                ha_predict(self.state, t), ha_predict(self.state, t + 5 * WEEK)
            )

    def test_empty_training_data(self):
        with self.assertRaises(EmptyDatasetError):
            ha_fit(make_series(np.full((2, 30), np.nan)))
        with self.assertRaises(EmptyDatasetError):
            ha_fit(make_series(np.zeros((2, 0))))


def test_weekly_periodic_series_is_predicted_exactly():
    series = weekly_periodic(np.random.default_rng(0))
    state = ha_fit(series.window(0, 2 * WEEK))
    anchors = range(2 * WEEK - 1, 3 * WEEK - 1)
    metrics = baseline_metrics(state, series, anchors, k=1)
    assert metrics["ha"].rmse == 0.0
    assert metrics["seasonal_naive"].rmse == 0.0


def test_horizon_does_not_change_ha_at_the_same_target():
    series = weekly_periodic(np.random.default_rng(1))
    state = ha_fit(series.window(0, 2 * WEEK))
    one = baseline_predictions(state, series, [399], k=1)["ha"]
    four = baseline_predictions(state, series, [396], k=4)["ha"]
    np.testing.assert_array_equal(one, four)


def test_ha_uses_global_indices_of_a_window():
    series = weekly_periodic(np.random.default_rng(2))
    state = ha_fit(series.window(0, 2 * WEEK))
    tail = series.window(2 * WEEK, 3 * WEEK)
    for t in (10, 50):
        target = tail.offset + t + 1
        np.testing.assert_array_equal(ha_predict(state, target), tail.values[:, [t + 1]])


def test_invariant_to_permuting_training_weeks():
    rng = np.random.default_rng(3)
    values = rng.standard_normal((4, 3 * WEEK))
    weeks = np.split(values, 3, axis=1)
    shuffled = np.concatenate([weeks[2], weeks[0], weeks[1]], axis=1)
    a, b = ha_fit(make_series(values)), ha_fit(make_series(shuffled))
    np.testing.assert_allclose(a.means, b.means, rtol=0, atol=1e-12)


def test_never_reads_later_data():
    rng = np.random.default_rng(4)
    clean = rng.uniform(0, 10, (3, 3 * WEEK))
    corrupted = clean.copy()
    corrupted[:, 2 * WEEK :] = 1e9
    a = ha_fit(make_series(clean).window(0, 2 * WEEK))
    b = ha_fit(make_series(corrupted).window(0, 2 * WEEK))
    np.testing.assert_array_equal(a.means, b.means)

    t = 2 * WEEK - 1
    corrupted = clean.copy()
    corrupted[:, t + 1 :] = np.nan
    np.testing.assert_array_equal(
        seasonal_naive_predict(make_series(clean), t, 1),
        seasonal_naive_predict(make_series(corrupted), t, 1),
    )


class TestSeasonalNaive(unittest.TestCase):
    """Test the one-week-ago predictor."""

    def test_constant_series(self):
        series = make_series(np.full((2, WEEK + 5), 42.0))
        np.testing.assert_array_equal(seasonal_naive_predict(series, WEEK, 2), [[42.0], [42.0]])

    def test_reads_one_period_back(self):
        series = make_series(np.arange(2 * WEEK, dtype=float))
        self.assertEqual(seasonal_naive_predict(series, 200, 3)[0, 0], 203 - WEEK)
        self.assertEqual(seasonal_naive_predict(series, 200, 3, period=24)[0, 0], 179)

    def test_insufficient_history(self):
        series = make_series(np.zeros((1, 2 * WEEK)))
        with self.assertRaises(OutOfRangeError) as ctx:
            seasonal_naive_predict(series, 100, 1)
        self.assertEqual(ctx.exception.earliest_index, 101 - WEEK)

    def test_white_noise(self):
        rng = np.random.default_rng(5)
        sigma = 3.0
        series = make_series(rng.normal(0.0, sigma, (50, 3 * WEEK)))
        state = ha_fit(series.window(0, WEEK))
        anchors = range(WEEK - 1, 3 * WEEK - 1)
        rmse = baseline_metrics(state, series, anchors, k=1)["seasonal_naive"].rmse
        assert rmse == pytest.approx(np.sqrt(2) * sigma, rel=0.05)


def test_baseline_metrics_needs_anchors():
    series = weekly_periodic(np.random.default_rng(6))
    with pytest.raises(EmptyDatasetError):
        baseline_metrics(ha_fit(series), series, [], k=1)
