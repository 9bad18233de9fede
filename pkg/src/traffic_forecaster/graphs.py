"""Station graphs: spatial proximity, functional similarity and recent-trend similarity.

Every graph is binary. Edge weights (distance kernel or Pearson correlation) are only
used to rank station pairs; ``sparsify`` keeps the strongest fixed fraction of them.
"""

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data import TrafficSeries
from .errors import DataError, InsufficientDataError, OutOfRangeError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
POWER_SHIFT = 2.0
POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000
FLAT_RTOL = 1e-12
DEFAULT_CACHE_SIZE = 256


class GraphKind(Enum):
    """Graph types; the value is the name used in config files and exports."""

    SPATIAL = "spatial"
    FUNCTIONAL = "functional"
    RECENT_TREND = "recent_trend"


ALL_GRAPHS = (GraphKind.SPATIAL, GraphKind.FUNCTIONAL, GraphKind.RECENT_TREND)


@dataclass
class AdjacencyMatrix:
    """Binary symmetric N×N adjacency with zero diagonal.

    ``meta`` records how the graph was built (kind, p, sigma or H) for exports.
    """

    entries: np.ndarray
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        a = self.entries
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"adjacency must be square, got shape {a.shape}")
        if not np.isin(a, (0.0, 1.0)).all():
            raise DataError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise DataError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise DataError("adjacency must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return int(np.triu(self.entries, k=1).sum())

    def edges(self) -> List[tuple]:
        i, j = np.nonzero(np.triu(self.entries, k=1))
        return list(zip(i.tolist(), j.tolist()))

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[tuple], meta: Dict[str, str] = None):
        a = np.zeros((n, n))
        for i, j in edges:
            if i == j:
                continue
            a[i, j] = a[j, i] = 1.0
        return cls(a, meta=dict(meta or {}))


@dataclass
class ScaledLaplacian:
    """L̃ = 2L/λ_max − I together with the λ_max used."""

    matrix: np.ndarray
    lambda_max: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


# --- distances and correlations ------------------------------------------------


def _check_coords(lat, lon) -> None:
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180) or not (
        np.isfinite(lat).all() and np.isfinite(lon).all()
    ):
        raise DataError("latitudes must lie in [-90, 90] and longitudes in [-180, 180]")


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters between two points given in degrees."""
    _check_coords([lat1, lat2], [lon1, lon2])
    lat1, lon1, lat2, lon2 = map(math.radians, [lat1, lon1, lat2, lon2])
    a = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    return EARTH_RADIUS_M * 2 * math.atan2(math.sqrt(a), math.sqrt(max(0.0, 1 - a)))


def pairwise_haversine(coords: np.ndarray) -> np.ndarray:
    """N×N distance matrix in meters for an N×2 array of (latitude, longitude)."""
    coords = np.asarray(coords, dtype=np.float64)
    _check_coords(coords[:, 0], coords[:, 1])
    lat, lon = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    dlat = lat[None, :] - lat[:, None]
    dlon = lon[None, :] - lon[:, None]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    a = np.clip(a, 0.0, 1.0)
    return EARTH_RADIUS_M * 2 * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


def _flat(rows: np.ndarray, std: np.ndarray) -> np.ndarray:
    """True per row when the series is constant up to rounding of its mean."""
    mean = np.abs(rows.mean(axis=-1))
    return (np.ptp(rows, axis=-1) == 0) | (std <= FLAT_RTOL * np.maximum(1.0, mean))


def pcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation with population moments; 0 when either series is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"pcc needs two 1-D series of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DataError("pcc needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.mean(dx * dx)), math.sqrt(np.mean(dy * dy))
    if _flat(x, np.float64(sx)) or _flat(y, np.float64(sy)):
        return 0.0
    return float(np.clip(np.mean(dx * dy) / (sx * sy), -1.0, 1.0))


def pcc_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise PCC between the rows of an N×L matrix, same conventions as ``pcc``."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] < 2:
        raise DataError("pcc needs at least two points")
    centered = rows - rows.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=1))
    live = ~_flat(rows, std)
    cov = centered @ centered.T / rows.shape[1]
    denom = np.outer(std, std)
    ok = np.outer(live, live)
    corr = np.where(ok, cov / np.where(ok, denom, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


# --- sparsification ------------------------------------------------------------


def sparsify(weights: np.ndarray, p: float, meta: Dict[str, str] = None) -> AdjacencyMatrix:
    """Keep the station pairs whose |weight| reaches the upper ⌈(1−p)·M⌉-th rank.

    M = N(N−1)/2 upper-triangle pairs. Ties at the threshold are all kept. Zero
    weights never form edges, so an all-zero matrix yields an empty graph.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if not 0 < p < 1:
        raise DataError(f"keep proportion p must lie in (0, 1), got {p}")
    meta = dict(meta or {})
    meta.setdefault("p", repr(p))
    if n < 2:
        return AdjacencyMatrix(np.zeros((n, n)), meta=meta)

    iu = np.triu_indices(n, k=1)
    upper = np.abs(weights[iu])
    m = upper.size
    rank = min(m, max(1, math.ceil(round((1 - p) * m, 9))))
    eps = np.sort(upper)[::-1][rank - 1]
    keep = (upper >= eps) & (upper > 0)
    if not keep.any():
        logger.warning("all edge weights are zero; graph %s is empty", meta.get("kind", "?"))

    entries = np.zeros((n, n))
    entries[iu[0][keep], iu[1][keep]] = 1.0
    entries = entries + entries.T
    return AdjacencyMatrix(entries, meta=meta)


# --- graph constructions -------------------------------------------------------


def build_spatial_proximity(coords: np.ndarray, sigma: float, p: float) -> AdjacencyMatrix:
    """Gaussian kernel exp(−d²/σ²) on great-circle distances, then sparsify."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    d = pairwise_haversine(coords)
    w = np.exp(-(d**2) / sigma**2)
    np.fill_diagonal(w, 0.0)
    return sparsify(w, p, meta={"kind": GraphKind.SPATIAL.value, "sigma": repr(sigma)})


def weekly_profiles(series: TrafficSeries) -> np.ndarray:
    """Average weekly pattern (N × 7·T_o) over the complete Monday-00:00 weeks of a series."""
    week = 7 * series.points_per_day
    ts = series.timestamps
    starts = np.nonzero((ts.dayofweek == 0) & (ts.hour == 0) & (ts.minute == 0))[0]
    if starts.size == 0:
        raise InsufficientDataError("series contains no Monday 00:00 week boundary")
    first = int(starts[0])
    n_weeks = (series.n_points - first) // week
    if n_weeks < 1:
        raise InsufficientDataError(
            f"functional similarity needs one full week from {ts[first]}; "
            f"only {series.n_points - first} points available"
        )
    block = series.values[:, first : first + n_weeks * week]
    return block.reshape(series.n_stations, n_weeks, week).mean(axis=1)


def build_functional_similarity(
    train: TrafficSeries, p: float, T_o: Optional[int] = None
) -> AdjacencyMatrix:
    """PCC between stations' average weekly demand profiles, then sparsify.

    Args:
        train: training part of the series (at least one complete week)
        p: keep proportion
        T_o: points per day; taken from the series when omitted
    """
    if T_o is not None and T_o != train.points_per_day:
        raise DataError(f"T_o={T_o} disagrees with the series ({train.points_per_day})")
    w = pcc_matrix(weekly_profiles(train))
    np.fill_diagonal(w, 0.0)
    return sparsify(w, p, meta={"kind": GraphKind.FUNCTIONAL.value})


def build_recent_trend(values: np.ndarray, t: int, H: int, p: float) -> AdjacencyMatrix:
    """PCC over the H points ending at t (inclusive), then sparsify.

    Only columns ≤ t are read.
    """
    if t < H - 1:
        raise OutOfRangeError(
            f"recent trend at anchor {t} needs {H} points; earliest index {t - H + 1}",
            earliest_index=t - H + 1,
        )
    window = np.asarray(values)[:, t - H + 1 : t + 1]
    w = pcc_matrix(window)
    np.fill_diagonal(w, 0.0)
    return sparsify(w, p, meta={"kind": GraphKind.RECENT_TREND.value, "H": str(H)})


# --- Laplacians ----------------------------------------------------------------


def normalized_laplacian(adj: AdjacencyMatrix) -> np.ndarray:
    """L = I − D^{−1/2} A D^{−1/2}; isolated nodes get a zero D^{−1/2} entry."""
    a = adj.entries
    deg = a.sum(axis=1)
    d_inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    d_inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(a.shape[0]) - d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]


def lambda_max(
    laplacian: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> float:
    """Largest eigenvalue of a symmetric Laplacian by power iteration on L + 2I.

    Stops when the residual ‖Mv − λv‖ drops below ``tol``. If the iteration limit runs
    out while the Rayleigh quotient is still moving, falls back to 2 (an upper bound for
    normalized Laplacians) with a warning.
    """
    n = laplacian.shape[0]
    if n == 0:
        return 0.0
    shifted = laplacian + POWER_SHIFT * np.eye(n)
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    estimate = prev = None
    for _ in range(max_iter):
        y = shifted @ v
        estimate = float(v @ y)
        if np.linalg.norm(y - estimate * v) < tol:
            return estimate - POWER_SHIFT
        norm = np.linalg.norm(y)
        if norm == 0:
            break
        prev_v, v = v, y / norm
        settled = prev is not None and abs(estimate - prev) <= tol * 1e-3
        if settled and np.allclose(v, prev_v, atol=tol**0.5):
            return estimate - POWER_SHIFT
        prev = estimate
    logger.warning("power iteration did not converge in %d steps; using lambda_max = 2", max_iter)
    return 2.0


def scaled_laplacian(laplacian: np.ndarray, lam: float) -> ScaledLaplacian:
    """L̃ = 2L/λ_max − I."""
    if not lam > 0:
        raise DataError(f"lambda_max must be positive, got {lam}")
    n = laplacian.shape[0]
    return ScaledLaplacian(2.0 * laplacian / lam - np.eye(n), float(lam))


def scaled_laplacian_of(adj: AdjacencyMatrix) -> ScaledLaplacian:
    lap = normalized_laplacian(adj)
    return scaled_laplacian(lap, lambda_max(lap))


# --- graph set ------------------------------------------------------------------


class GraphSet:
    """Static graphs with precomputed Laplacians plus the on-demand recent-trend graph.

    Dynamic Laplacians are kept in a thread-safe LRU cache keyed by anchor.
    """

    def __init__(
        self,
        static: Dict[GraphKind, AdjacencyMatrix],
        enabled: Sequence[GraphKind] = ALL_GRAPHS,
        values: Optional[np.ndarray] = None,
        H: int = 48,
        p: float = 0.9,
        cache_size: int = DEFAULT_CACHE_SIZE,
    ):
        self.enabled = [GraphKind(k) for k in enabled]
        if not self.enabled:
            raise DataError("at least one graph must be enabled")
        for kind in self.enabled:
            if kind is not GraphKind.RECENT_TREND and kind not in static:
                raise DataError(f"graph {kind.value} is enabled but was not built")
        if GraphKind.RECENT_TREND in self.enabled and values is None:
            raise DataError("recent-trend graph needs the series values")
        self.static = dict(static)
        self.static_laplacians = {k: scaled_laplacian_of(a) for k, a in self.static.items()}
        self.values = values
        self.H = H
        self.p = p
        self.cache_size = cache_size
        self._cache: "OrderedDict[int, ScaledLaplacian]" = OrderedDict()
        self._lock = threading.Lock()
        self.cache_hits = 0
        self.cache_misses = 0

    @property
    def n(self) -> int:
        if self.static:
            return next(iter(self.static.values())).n
        return self.values.shape[0]

    def recent_trend(self, t: int) -> AdjacencyMatrix:
        return build_recent_trend(self.values, t, self.H, self.p)

    def dynamic_laplacian(self, t: int) -> ScaledLaplacian:
        with self._lock:
            cached = self._cache.get(t)
            if cached is not None:
                self._cache.move_to_end(t)
                self.cache_hits += 1
                return cached
        lap = scaled_laplacian_of(self.recent_trend(t))
        with self._lock:
            self.cache_misses += 1
            self._cache[t] = lap
            self._cache.move_to_end(t)
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return lap

    def laplacians_at(self, t: int) -> Dict[GraphKind, np.ndarray]:
        """L̃ of every enabled graph for anchor t, in enabled order."""
        out = {}
        for kind in self.enabled:
            if kind is GraphKind.RECENT_TREND:
                out[kind] = self.dynamic_laplacian(t).matrix
            else:
                out[kind] = self.static_laplacians[kind].matrix
        return out


# --- diagnostics and export ------------------------------------------------------


def pcc_timeline(
    series: TrafficSeries, focus: Union[int, str], anchors: Sequence[int], H: int
) -> pd.DataFrame:
    """PCC of one station against every station over the H points ending at each anchor.

    Returns:
        DataFrame indexed by anchor with one column per station (the focus column is 1
        unless the focus series is constant on the window)
    """
    idx = series.station_ids.index(focus) if isinstance(focus, str) else int(focus)
    rows = []
    for t in anchors:
        if t < H - 1:
            raise OutOfRangeError(
                f"pcc timeline anchor {t} needs {H} points; earliest index {t - H + 1}",
                earliest_index=t - H + 1,
            )
        window = series.values[:, t - H + 1 : t + 1]
        rows.append(pcc_matrix(window)[idx])
    index = pd.Index(list(anchors), name="anchor")
    df = pd.DataFrame(rows, columns=series.station_ids, index=index)
    return df


def save_edge_list(adj: AdjacencyMatrix, path: Union[str, Path]) -> None:
    """Write ``i,j`` rows (0-based, i < j) preceded by a ``#`` metadata line."""
    meta = {"n": str(adj.n), **adj.meta}
    header = "# " + " ".join(f"{k}={v}" for k, v in meta.items())
    edges = pd.DataFrame(adj.edges(), columns=["i", "j"])
    with open(path, "w") as f:
        f.write(header + "\n")
        edges.to_csv(f, index=False)


def load_edge_list(path: Union[str, Path], n: Optional[int] = None) -> AdjacencyMatrix:
    """Read an edge list written by ``save_edge_list`` (or a bare ``i,j`` CSV with ``n`` given)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Edge list not found at {path}")
    meta: Dict[str, str] = {}
    with open(path) as f:
        first = f.readline()
    if first.startswith("#"):
        for token in first[1:].split():
            if "=" in token:
                key, value = token.split("=", 1)
                meta[key] = value
    edges = pd.read_csv(path, comment="#")
    if list(edges.columns) != ["i", "j"]:
        raise DataError(f"{path}: expected columns i,j")
    size = n if n is not None else int(meta.get("n", 0))
    if size <= 0:
        raise DataError(f"{path}: node count unknown (no n= metadata and none given)")
    if len(edges) and (edges.to_numpy().min() < 0 or edges.to_numpy().max() >= size):
        raise DataError(f"{path}: station index outside 0..{size - 1}")
    meta.pop("n", None)
    return AdjacencyMatrix.from_edges(size, edges.to_numpy().tolist(), meta=meta)
