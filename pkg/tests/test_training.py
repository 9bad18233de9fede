"""Tests for the loss, RMSProp, the schedule, the metrics and the training loop."""

import math
import unittest

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from traffic_forecaster.data import build_samples
from traffic_forecaster.errors import EmptyDatasetError, NumericalError
from traffic_forecaster.graphs import GraphKind
from traffic_forecaster.tensor import DiffTensor
from traffic_forecaster.training import (
    RMSProp,
    TrainConfig,
    clip_gradients,
    error_metrics,
    evaluate,
    fit,
    loss,
    lr_at,
    rmsprop_step,
    train_step,
)

from .factories import make_series, tiny_model

STATIC = (GraphKind.SPATIAL, GraphKind.FUNCTIONAL)


class TestLoss(unittest.TestCase):
    """Test the MSE plus weighted MAE objective."""

    def test_hand_example(self):
        value = loss(DiffTensor([[1.0], [2.0]]), np.array([[3.0], [0.0]]), alpha=1e-4).item()
        self.assertAlmostEqual(value, 4.0002, places=12)

    def test_zero_when_equal(self):
        x = np.array([[1.5], [-2.0], [0.25]])
        self.assertEqual(loss(DiffTensor(x), x, alpha=0.5).item(), 0.0)

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(0)
        pred, target = rng.standard_normal((12, 1)), rng.standard_normal((12, 1))
        diffs = (pred - target).ravel().tolist()
        expected = sum(d * d for d in diffs) / 12 + 0.3 * sum(abs(d) for d in diffs) / 12
        value = loss(DiffTensor(pred), target, alpha=0.3).item()
        self.assertAlmostEqual(value, expected, places=12)


class TestRMSProp(unittest.TestCase):
    """Test a single optimizer update."""

    def test_first_step(self):
        new, s = rmsprop_step(np.array([0.0]), np.array([1.0]), np.array([0.0]), 1e-3, 0.9, 1e-8)
        self.assertAlmostEqual(s[0], 0.1, places=15)
        self.assertAlmostEqual(new[0], -3.16228e-3, places=8)

    def test_zero_gradient_only_decays_state(self):
        new, s = rmsprop_step(np.array([2.0]), np.array([0.0]), np.array([0.5]), 1e-3, 0.9, 1e-8)
        self.assertEqual(new[0], 2.0)
        self.assertAlmostEqual(s[0], 0.45, places=15)

    def test_non_finite_gradient(self):
        with self.assertRaises(NumericalError):
            rmsprop_step(np.zeros(2), np.array([np.nan, 1.0]), np.zeros(2), 1e-3, 0.9, 1e-8)

    def test_optimizer_updates_in_place_and_leaves_params_on_error(self):
        params = {"w": np.array([1.0, 1.0])}
        opt = RMSProp(params)
        opt.step(params, {"w": np.array([1.0, -1.0])}, lr=1e-3)
        self.assertLess(params["w"][0], 1.0)
        self.assertGreater(params["w"][1], 1.0)
        before = params["w"].copy()
        with self.assertRaises(NumericalError):
            opt.step(params, {"w": np.array([np.inf, 0.0])}, lr=1e-3)
        np.testing.assert_array_equal(params["w"], before)


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])


def test_learning_rate_schedule():
    cfg = TrainConfig(lr0=1e-3, decay=0.7, decay_every=5)
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(4, cfg) == 1e-3
    assert lr_at(5, cfg) == pytest.approx(7e-4, rel=1e-12)
    assert lr_at(10, cfg) == pytest.approx(4.9e-4, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


class TestMetrics(unittest.TestCase):
    """Test RMSE and MAE."""

    def test_hand_example(self):
        m = error_metrics(np.array([3.0, 4.0]), np.zeros(2))
        self.assertAlmostEqual(m.rmse, math.sqrt(12.5), places=12)
        self.assertEqual(m.mae, 3.5)
        self.assertEqual(m.to_json(3), {"horizon_steps": 3, "rmse": m.rmse, "mae": 3.5})

    def test_perfect_prediction(self):
        x = np.arange(6.0).reshape(2, 3, 1)
        m = error_metrics(x, x)
        self.assertEqual((m.rmse, m.mae), (0.0, 0.0))

    def test_rmse_never_below_mae(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = error_metrics(rng.standard_normal(30), rng.standard_normal(30))
            self.assertGreaterEqual(m.rmse, m.mae * (1 - 1e-12))

    def test_empty(self):
        with self.assertRaises(EmptyDatasetError):
            error_metrics(np.zeros(0), np.zeros(0))


def test_train_config_rejects_unknown_and_invalid_fields():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.1)
    with pytest.raises(ValidationError):
        TrainConfig(decay=1.5)


def _setup(seed=0):
    rng = np.random.default_rng(seed)
    model, series = tiny_model(rng, enabled=STATIC, n_points=40)
    samples = build_samples(series, model.config.slicing)
    return model, samples[:20], samples[20:28]


class TestFit(unittest.TestCase):
    """Test the training loop."""

    cfg = TrainConfig(epochs=2, batch_size=8, lr0=1e-2, seed=3)

    def test_one_epoch_changes_parameters(self):
        model, train, val = _setup()
        before = model.snapshot()
        fit(model, train, val, self.cfg.model_copy(update={"epochs": 1}))
        changed = [n for n, v in model.parameters().items() if not np.array_equal(v, before[n])]
        self.assertIn("W_f", changed)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model, train, val = _setup()
            result = fit(model, train, val, self.cfg)
            runs.append((result.log.to_frame(), model.snapshot()))
        pd.testing.assert_frame_equal(runs[0][0], runs[1][0])
        for name, value in runs[0][1].items():
            np.testing.assert_array_equal(value, runs[1][1][name])

    def test_keeps_best_validation_parameters(self):
        model, train, val = _setup()
        result = fit(model, train, val, self.cfg.model_copy(update={"epochs": 4}))
        frame = result.log.to_frame()
        self.assertEqual(len(frame), 4)
        self.assertEqual(result.best_val_rmse, frame["val_rmse"].min())
        self.assertEqual(result.best_epoch, int(frame["val_rmse"].idxmin()))
        self.assertAlmostEqual(evaluate(model, val).rmse, result.best_val_rmse, places=12)

    def test_nan_loss_reports_batch(self):
        model, train, val = _setup()
        model.head.W_f[...] = np.nan
        with self.assertRaises(NumericalError) as ctx:
            fit(model, train, val, self.cfg)
        self.assertEqual(ctx.exception.batch_index, 0)

    def test_empty_sets(self):
        model, train, _ = _setup()
        with self.assertRaises(EmptyDatasetError):
            fit(model, train, [], self.cfg)
        with self.assertRaises(EmptyDatasetError):
            evaluate(model, [])


def test_train_step_returns_a_gradient_per_parameter():
    model, train, _ = _setup(seed=4)
    value, grads = train_step(model, train[:3], TrainConfig())
    assert math.isfinite(value) and value > 0
    assert set(grads) == set(model.parameters())
    for name, grad in grads.items():
        assert grad.shape == model.parameters()[name].shape


def test_training_log_csv(tmp_path):
    model, train, val = _setup()
    result = fit(model, train, val, TrainConfig(epochs=2, batch_size=8))
    result.log.to_csv(tmp_path / "log.csv")
    frame = pd.read_csv(tmp_path / "log.csv")
    assert list(frame.columns) == ["epoch", "train_loss", "val_rmse", "lr"]
    assert frame["epoch"].tolist() == [0, 1]


@pytest.mark.slow
def test_overfits_a_small_training_set():
    rng = np.random.default_rng(5)
    model, _ = tiny_model(rng, n=8, enabled=STATIC, n_points=60)
    t = np.arange(60)
    phases = rng.uniform(0, 2 * np.pi, (8, 1))
    series = make_series(np.sin(2 * np.pi * t / 12 + phases))
    samples = build_samples(series, model.config.slicing)[:50]
    assert len(samples) == 50

    cfg = TrainConfig(epochs=200, batch_size=10, lr0=1e-2, decay=0.7, decay_every=50, seed=1)
    result = fit(model, samples, samples, cfg)
    losses = result.log.to_frame()["train_loss"]
    assert losses.iloc[-1] <= 0.05 * losses.iloc[0]
