"""Tests for the synthetic dataset generator."""

import unittest

import numpy as np
import pandas as pd
import pytest

from traffic_forecaster.data import load_station_coords, load_traffic_csv
from traffic_forecaster.graphs import (
    build_functional_similarity,
    load_edge_list,
    pcc,
    weekly_profiles,
)
from traffic_forecaster.synth import SynthSpec, generate, write_dataset

CLEAN = dict(noise_std=0.0, mixing=0.0)


class TestPlantedStructure(unittest.TestCase):
    """Test the periodic and clustered structure of the generated series."""

    def test_noiseless_series_is_weekly_periodic(self):
        ds = generate(SynthSpec(weeks=3, granularity_minutes=60, **CLEAN))
        period = 7 * 24
        values = ds.series.values
        np.testing.assert_allclose(values[:, period:], values[:, :-period], rtol=0, atol=1e-9)

    def test_same_cluster_profiles_are_perfectly_correlated(self):
        ds = generate(SynthSpec(weeks=2, granularity_minutes=60, **CLEAN))
        profiles = weekly_profiles(ds.series)
        for i in range(ds.series.n_stations):
            for j in range(i + 1, ds.series.n_stations):
                if ds.clusters[i] == ds.clusters[j]:
                    self.assertAlmostEqual(pcc(profiles[i], profiles[j]), 1.0, places=9)

    def test_checkerboard_clusters(self):
        ds = generate(SynthSpec())
        rows, cols = np.arange(20) // 5, np.arange(20) % 5
        np.testing.assert_array_equal(ds.clusters, (rows + cols) % 2)
        self.assertEqual(ds.functional_truth.edge_count, 90)
        self.assertAlmostEqual(ds.matching_p, 1 - 90 / 190, places=15)

    def test_clusters_are_half_a_day_apart(self):
        ds = generate(SynthSpec(granularity_minutes=60, weeks=1))
        np.testing.assert_array_equal(ds.phases, ds.clusters * 12.0)

    def test_values_are_non_negative(self):
        ds = generate(SynthSpec(weeks=1, base=0.0, noise_std=30.0))
        self.assertGreaterEqual(np.nanmin(ds.series.values), 0.0)


@pytest.mark.parametrize("overrides", [CLEAN, {}], ids=["noiseless", "default"])
def test_functional_similarity_recovers_the_clusters(overrides):
    ds = generate(SynthSpec(**overrides))
    graph = build_functional_similarity(ds.series, ds.matching_p)
    np.testing.assert_array_equal(graph.entries, ds.functional_truth.entries)


def test_same_seed_reproduces_and_other_seed_differs():
    spec = SynthSpec(weeks=1, granularity_minutes=60, seed=7)
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.series.values, b.series.values)
    np.testing.assert_array_equal(a.coords, b.coords)
    c = generate(spec.model_copy(update={"seed": 8}))
    assert not np.array_equal(a.series.values, c.series.values)


def test_missing_cells():
    ds = generate(SynthSpec(weeks=1, granularity_minutes=60, missing_fraction=0.1))
    share = ds.series.missing_count() / ds.series.values.size
    assert 0.05 < share < 0.15


def test_series_layout():
    ds = generate(SynthSpec(n_nodes=6, weeks=2, granularity_minutes=30, n_neighbors=2))
    assert ds.series.station_ids == [f"S00{i}" for i in range(6)]
    assert ds.series.n_points == 2 * 7 * 48
    assert ds.series.timestamps[0] == pd.Timestamp("2024-01-01 00:00")
    assert ds.neighbors.shape == (6, 2)
    assert not (ds.neighbors == np.arange(6)[:, None]).any()


def test_invalid_specs():
    with pytest.raises(ValueError):
        SynthSpec(n_nodes=4, n_neighbors=4)
    with pytest.raises(ValueError):
        SynthSpec(granularity_minutes=7)
    with pytest.raises(ValueError):
        SynthSpec(n_nodes=3, n_clusters=4)
    with pytest.raises(ValueError):
        SynthSpec(unknown=1)


def test_write_dataset(tmp_path):
    ds = generate(SynthSpec(n_nodes=6, weeks=1, granularity_minutes=60, n_neighbors=2))
    paths = write_dataset(ds, tmp_path / "planted")
    assert all(path.exists() for path in paths.values())

    series = load_traffic_csv(paths["traffic"])
    assert series.station_ids == ds.series.station_ids
    np.testing.assert_allclose(series.values, ds.series.values, atol=1e-6)
    coords = load_station_coords(paths["stations"], series.station_ids)
    np.testing.assert_allclose(coords, ds.coords, atol=1e-7)

    truth = load_edge_list(paths["functional_truth"])
    np.testing.assert_array_equal(truth.entries, ds.functional_truth.entries)
    assert float(truth.meta["matching_p"]) == ds.matching_p

    clusters = pd.read_csv(paths["clusters"])
    assert clusters["cluster"].tolist() == ds.clusters.tolist()
