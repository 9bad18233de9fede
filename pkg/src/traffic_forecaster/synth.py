"""Synthetic traffic with planted daily/weekly structure, phase clusters and spatial mixing."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import MINUTES_PER_DAY, TrafficSeries, save_station_coords, save_traffic_csv
from .graphs import AdjacencyMatrix, GraphKind, pairwise_haversine, save_edge_list

logger = logging.getLogger(__name__)

METERS_PER_DEGREE = 111_195.0


class SynthSpec(BaseModel):
    """Generator settings; the same spec and seed always give the same dataset.

    Node i gets a scale a_i drawn from [1 − amplitude_jitter, 1 + amplitude_jitter];
    its base level and both amplitudes are multiplied by a_i, so stations in the same
    phase cluster have proportional clean profiles.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_nodes: int = Field(20, ge=2)
    weeks: int = Field(8, ge=1)
    granularity_minutes: int = Field(15, gt=0)
    start: str = "2024-01-01 00:00:00"
    n_clusters: int = Field(2, ge=1)
    base: float = Field(100.0, ge=0)
    daily_amplitude: float = Field(50.0, ge=0)
    weekly_amplitude: float = Field(20.0, ge=0)
    amplitude_jitter: float = Field(0.2, ge=0, lt=1)
    phase_jitter: float = Field(0.0, ge=0)
    mixing: float = Field(0.3, ge=0)
    n_neighbors: int = Field(4, ge=1)
    noise_std: float = Field(5.0, ge=0)
    missing_fraction: float = Field(0.0, ge=0, lt=1)
    spacing_m: float = Field(150.0, gt=0)
    grid_jitter: float = Field(0.2, ge=0, lt=0.5)
    origin_lat: float = Field(30.25, ge=-89, le=89)
    origin_lon: float = Field(120.15, ge=-179, le=179)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if MINUTES_PER_DAY % self.granularity_minutes:
            raise ValueError(f"granularity {self.granularity_minutes} min does not divide a day")
        if self.n_clusters > self.n_nodes:
            raise ValueError("more phase clusters than nodes")
        if self.n_neighbors >= self.n_nodes:
            raise ValueError("n_neighbors must be below n_nodes")
        return self

    @property
    def points_per_day(self) -> int:
        return MINUTES_PER_DAY // self.granularity_minutes

    @property
    def n_points(self) -> int:
        return self.weeks * 7 * self.points_per_day


@dataclass
class SynthDataset:
    series: TrafficSeries
    coords: np.ndarray
    clusters: np.ndarray
    phases: np.ndarray
    scales: np.ndarray
    neighbors: np.ndarray
    functional_truth: AdjacencyMatrix

    @property
    def matching_p(self) -> float:
        """Keep proportion under which sparsify retains exactly the ground-truth edge count."""
        n = self.series.n_stations
        return 1.0 - self.functional_truth.edge_count / (n * (n - 1) / 2)


def grid_layout(spec: SynthSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Jittered grid positions and checkerboard cluster labels.

    Grid neighbors fall into different clusters, so functional and spatial graphs differ.
    """
    side = math.ceil(math.sqrt(spec.n_nodes))
    idx = np.arange(spec.n_nodes)
    rows, cols = idx // side, idx % side
    clusters = (rows + cols) % spec.n_clusters
    jitter = rng.uniform(-spec.grid_jitter, spec.grid_jitter, size=(spec.n_nodes, 2))
    north = (rows + jitter[:, 0]) * spec.spacing_m
    east = (cols + jitter[:, 1]) * spec.spacing_m
    lat = spec.origin_lat + north / METERS_PER_DEGREE
    lon = spec.origin_lon + east / (METERS_PER_DEGREE * math.cos(math.radians(spec.origin_lat)))
    return np.column_stack([lat, lon]), clusters


def nearest_neighbors(coords: np.ndarray, k: int) -> np.ndarray:
    d = pairwise_haversine(coords)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def cluster_graph(clusters: np.ndarray) -> AdjacencyMatrix:
    same = (clusters[:, None] == clusters[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    return AdjacencyMatrix(same, meta={"kind": GraphKind.FUNCTIONAL.value, "source": "synth"})


def generate(spec: SynthSpec) -> SynthDataset:
    """Build the planted dataset.

    x_i(t) = s_i(t) + mixing·mean_{j∈nbr(i)} s_j(t) + noise, clipped at 0, where
    s_i(t) = a_i·(base + A_d·sin(2π(t+φ_i)/T_o) + A_w·sin(2πt/(7T_o))).
    """
    rng = np.random.default_rng(spec.seed)
    T_o = spec.points_per_day
    coords, clusters = grid_layout(spec, rng)
    scales = rng.uniform(1 - spec.amplitude_jitter, 1 + spec.amplitude_jitter, spec.n_nodes)
    phases = clusters * (T_o / spec.n_clusters)
    if spec.phase_jitter:
        phases = phases + rng.uniform(-spec.phase_jitter, spec.phase_jitter, spec.n_nodes)

    t = np.arange(spec.n_points, dtype=np.float64)
    daily = np.sin(2 * np.pi * (t[None, :] + phases[:, None]) / T_o)
    weekly = np.sin(2 * np.pi * t / (7 * T_o))
    clean = scales[:, None] * (
        spec.base + spec.daily_amplitude * daily + spec.weekly_amplitude * weekly[None, :]
    )

    neighbors = nearest_neighbors(coords, spec.n_neighbors)
    values = clean + spec.mixing * clean[neighbors].mean(axis=1)
    if spec.noise_std:
        values = values + rng.normal(0.0, spec.noise_std, size=values.shape)
    values = np.maximum(values, 0.0)
    if spec.missing_fraction:
        values[rng.random(values.shape) < spec.missing_fraction] = np.nan

    timestamps = pd.date_range(
        pd.Timestamp(spec.start), periods=spec.n_points, freq=f"{spec.granularity_minutes}min"
    )
    station_ids = [f"S{i:03d}" for i in range(spec.n_nodes)]
    series = TrafficSeries(station_ids, timestamps, values, spec.granularity_minutes)
    logger.info(
        "Generated %d stations × %d points (%d clusters, mixing %.2f, noise %.2f)",
        spec.n_nodes,
        spec.n_points,
        spec.n_clusters,
        spec.mixing,
        spec.noise_std,
    )
    return SynthDataset(
        series=series,
        coords=coords,
        clusters=clusters,
        phases=phases,
        scales=scales,
        neighbors=neighbors,
        functional_truth=cluster_graph(clusters),
    )


def write_dataset(dataset: SynthDataset, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write traffic.csv, stations.csv, clusters.csv and functional_truth.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "traffic": out_dir / "traffic.csv",
        "stations": out_dir / "stations.csv",
        "clusters": out_dir / "clusters.csv",
        "functional_truth": out_dir / "functional_truth.csv",
    }
    save_traffic_csv(dataset.series, paths["traffic"])
    save_station_coords(dataset.series.station_ids, dataset.coords, paths["stations"])
    pd.DataFrame(
        {
            "station_id": dataset.series.station_ids,
            "cluster": dataset.clusters,
            "phase": dataset.phases,
            "scale": dataset.scales,
        }
    ).to_csv(paths["clusters"], index=False)
    truth = dataset.functional_truth
    truth.meta = {**truth.meta, "matching_p": repr(dataset.matching_p)}
    save_edge_list(truth, paths["functional_truth"])
    return paths
