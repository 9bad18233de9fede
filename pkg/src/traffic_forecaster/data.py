"""Traffic data pipeline: CSV ingest, imputation, z-score scaling, time slicing, samples, splits."""

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    EmptyDatasetError,
    OutOfRangeError,
)

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
MINUTES_PER_DAY = 1440
STD_FLOOR = 1e-12
N_EXTERNAL_FEATURES = 2  # is-weekend, is-holiday


@dataclass
class TrafficSeries:
    """Traffic volumes of N stations on a regular time grid.

    Attributes:
        station_ids: N station identifiers, in column order of the source CSV
        timestamps: naive timestamps, strictly increasing with a fixed step
        values: N×T_total matrix; NaN marks a missing cell
        granularity_minutes: grid step in minutes; must divide 1440
        offset: global index of column 0 (non-zero for windows of a longer series)
    """

    station_ids: List[str]
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    granularity_minutes: int
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be N×T, got shape {self.values.shape}")
        if self.values.shape != (len(self.station_ids), len(self.timestamps)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.station_ids)} stations × {len(self.timestamps)} timestamps"
            )
        if self.granularity_minutes <= 0 or MINUTES_PER_DAY % self.granularity_minutes:
            raise DataError(
                f"granularity {self.granularity_minutes} min does not divide a day"
            )
        if len(self.timestamps) > 1:
            steps = np.diff(self.timestamps.asi8)
            expected = self.granularity_minutes * 60 * 10**9
            if np.any(steps != expected):
                bad = int(np.argmax(steps != expected))
                raise DataError(
                    f"timestamps are not a regular {self.granularity_minutes}-minute grid "
                    f"(break after {self.timestamps[bad]})"
                )

    @property
    def n_stations(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def points_per_day(self) -> int:
        """T_o."""
        return MINUTES_PER_DAY // self.granularity_minutes

    @property
    def slot_of_day(self) -> np.ndarray:
        minutes = self.timestamps.hour * 60 + self.timestamps.minute
        return np.asarray(minutes // self.granularity_minutes, dtype=np.int64)

    def missing_count(self) -> int:
        return int(np.isnan(self.values).sum())

    def with_values(self, values: np.ndarray) -> "TrafficSeries":
        return replace(self, values=values)

    def window(self, start: int, stop: int) -> "TrafficSeries":
        """View of columns start..stop-1 (local indices); shares memory with this series."""
        return TrafficSeries(
            station_ids=self.station_ids,
            timestamps=self.timestamps[start:stop],
            values=self.values[:, start:stop],
            granularity_minutes=self.granularity_minutes,
            offset=self.offset + start,
        )

    def index_of(self, when: Union[str, datetime, pd.Timestamp]) -> int:
        """Index of the first grid point at or after ``when``."""
        return int(self.timestamps.searchsorted(pd.Timestamp(when), side="left"))


# --- ingest -------------------------------------------------------------------


def load_traffic_csv(path: Union[str, Path]) -> TrafficSeries:
    """Read a ``timestamp,<station>,<station>,...`` CSV; empty cells become NaN.

    Args:
        path: CSV path

    Returns:
        TrafficSeries with granularity inferred from the first two timestamps
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Traffic CSV not found at {path}")
    df = pd.read_csv(path, dtype={"timestamp": str})
    if df.columns[0] != "timestamp" or df.shape[1] < 2:
        raise DataError(f"{path}: header must be 'timestamp,<station-id>,...'")
    try:
        timestamps = pd.DatetimeIndex(pd.to_datetime(df["timestamp"], format=TIMESTAMP_FORMAT))
    except ValueError as e:
        raise DataError(f"{path}: bad timestamp ({e})") from e
    if len(timestamps) < 2:
        raise DataError(f"{path}: need at least two timestamps to infer granularity")
    step = (timestamps[1] - timestamps[0]).total_seconds() / 60.0
    if step <= 0 or step != int(step):
        raise DataError(f"{path}: timestamps must increase by whole minutes")
    station_ids = [str(c) for c in df.columns[1:]]
    try:
        values = df[df.columns[1:]].apply(pd.to_numeric, errors="raise").to_numpy(float).T
    except ValueError as e:
        raise DataError(f"{path}: non-numeric traffic value ({e})") from e
    return TrafficSeries(station_ids, timestamps, values, int(step))


def save_traffic_csv(series: TrafficSeries, path: Union[str, Path]) -> None:
    df = pd.DataFrame(series.values.T, columns=series.station_ids)
    df.insert(0, "timestamp", series.timestamps.strftime(TIMESTAMP_FORMAT))
    df.to_csv(path, index=False, float_format="%.6f", na_rep="")


def load_station_coords(path: Union[str, Path], station_ids: Sequence[str]) -> np.ndarray:
    """Read ``station_id,latitude,longitude`` and return an N×2 array in ``station_ids`` order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Station CSV not found at {path}")
    df = pd.read_csv(path, dtype={"station_id": str})
    missing_cols = {"station_id", "latitude", "longitude"} - set(df.columns)
    if missing_cols:
        raise DataError(f"{path}: missing columns {sorted(missing_cols)}")
    table = df.set_index("station_id")
    absent = [s for s in station_ids if s not in table.index]
    if absent:
        raise DataError(f"{path}: no coordinates for stations {absent[:5]}")
    return table.loc[list(station_ids), ["latitude", "longitude"]].to_numpy(float)


def save_station_coords(
    station_ids: Sequence[str], coords: np.ndarray, path: Union[str, Path]
) -> None:
    df = pd.DataFrame(
        {"station_id": list(station_ids), "latitude": coords[:, 0], "longitude": coords[:, 1]}
    )
    df.to_csv(path, index=False, float_format="%.7f")


def load_holidays(path: Optional[Union[str, Path]]) -> Set[date]:
    """One ``YYYY-MM-DD`` per line; blank lines ignored; no file or empty file = no holidays."""
    if path is None:
        return set()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Holiday file not found at {path}")
    holidays = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            holidays.add(datetime.strptime(line, "%Y-%m-%d").date())
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad holiday date {line!r}") from e
    return holidays


# --- imputation ---------------------------------------------------------------


def impute_missing(series: TrafficSeries) -> TrafficSeries:
    """Fill NaN cells from history.

    A missing cell (i, t) takes the mean of station i's observed values at the same
    time of day on earlier days; without any, the mean of all its observed values
    before t; without any history at all, 0. Observed cells are left untouched.
    """
    values = series.values
    observed = ~np.isnan(values)
    filled = np.where(observed, values, 0.0)
    counts = observed.astype(np.float64)

    prior_sum = np.cumsum(filled, axis=1) - filled
    prior_cnt = np.cumsum(counts, axis=1) - counts

    slot_sum = np.zeros_like(filled)
    slot_cnt = np.zeros_like(filled)
    slots = series.slot_of_day
    for s in np.unique(slots):
        idx = np.nonzero(slots == s)[0]
        sub, cnt = filled[:, idx], counts[:, idx]
        slot_sum[:, idx] = np.cumsum(sub, axis=1) - sub
        slot_cnt[:, idx] = np.cumsum(cnt, axis=1) - cnt

    with np.errstate(invalid="ignore", divide="ignore"):
        slot_mean = np.where(slot_cnt > 0, slot_sum / np.maximum(slot_cnt, 1), np.nan)
        running_mean = np.where(prior_cnt > 0, prior_sum / np.maximum(prior_cnt, 1), 0.0)
    fallback = np.where(np.isnan(slot_mean), running_mean, slot_mean)
    result = np.where(observed, values, fallback)

    n_missing = int((~observed).sum())
    if n_missing:
        logger.info("Imputed %d missing cells (%.2f%%)", n_missing, 100.0 * n_missing / values.size)
    return series.with_values(result)


# --- scaling ------------------------------------------------------------------


@dataclass
class ZScoreScaler:
    """z-score with statistics from the training split.

    ``mean``/``std`` are scalars for the global scaler, or N×1 arrays when fitted per node.
    """

    mean: Union[float, np.ndarray]
    std: Union[float, np.ndarray]

    @property
    def per_node(self) -> bool:
        return np.ndim(self.mean) > 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> Dict:
        return {
            "mean": np.asarray(self.mean).tolist(),
            "std": np.asarray(self.std).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ZScoreScaler":
        mean, std = np.asarray(data["mean"], float), np.asarray(data["std"], float)
        if mean.ndim == 0:
            return cls(float(mean), float(std))
        return cls(mean, std)


def fit_zscore(train: Union[TrafficSeries, np.ndarray], per_node: bool = False) -> ZScoreScaler:
    """Fit mean and population std on training values only.

    A std below 1e-12 (constant series) is floored to 1.0.
    """
    values = train.values if isinstance(train, TrafficSeries) else np.asarray(train, float)
    if values.size == 0:
        raise EmptyDatasetError("cannot fit a scaler on an empty training slice")
    if per_node:
        values = np.atleast_2d(values)
        mean = values.mean(axis=1, keepdims=True)
        std = values.std(axis=1, keepdims=True)
        std = np.where(std < STD_FLOOR, 1.0, std)
        return ZScoreScaler(mean, std)
    mean = float(values.mean())
    std = float(values.std())
    if std < STD_FLOOR:
        std = 1.0
    return ZScoreScaler(mean, std)


# --- time slicing -------------------------------------------------------------


@dataclass(frozen=True)
class SliceConfig:
    """Time-slicing parameters.

    Attributes:
        l: segment length in points
        T_r, T_d, T_w: number of recent, daily and weekly segments
        T_o: points per day
        horizon: steps ahead (k)
    """

    l: int = 12
    T_r: int = 1
    T_d: int = 2
    T_w: int = 1
    T_o: int = 96
    horizon: int = 1

    def __post_init__(self):
        if self.l < 1 or self.T_r < 1 or self.T_d < 0 or self.T_w < 0:
            raise ConfigError(
                f"need l>=1, T_r>=1, T_d>=0, T_w>=0; got l={self.l}, "
                f"T_r={self.T_r}, T_d={self.T_d}, T_w={self.T_w}",
                field="slicing",
            )
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}", field="horizon")
        if self.T_o < 1:
            raise ConfigError(f"T_o must be >= 1, got {self.T_o}", field="slicing.T_o")
        if (self.T_d or self.T_w) and self.T_o < self.l - self.l // 2:
            raise ConfigError(
                f"a periodic segment of length {self.l} centered one day back would reach "
                f"past the anchor with T_o={self.T_o}",
                field="slicing.l",
            )

    @property
    def T(self) -> int:
        return (self.T_r + self.T_d + self.T_w) * self.l

    @property
    def half(self) -> int:
        return self.l // 2

    @property
    def min_anchor(self) -> int:
        """Smallest anchor whose every source index is >= 0."""
        earliest = self.l * self.T_r - 1
        if self.T_d:
            earliest = max(earliest, self.T_o * self.T_d + self.half - 1)
        if self.T_w:
            earliest = max(earliest, 7 * self.T_o * self.T_w + self.half - 1)
        return earliest

    def without_time_slicing(self) -> "SliceConfig":
        """Recent-only variant keeping the input length T (T_r rounded up if needed)."""
        return replace(self, T_r=math.ceil(self.T / self.l), T_d=0, T_w=0)


def _segment(start: int, length: int) -> np.ndarray:
    return np.arange(start, start + length)


def slice_indices(t: int, cfg: SliceConfig) -> np.ndarray:
    """Source indices of the input for anchor t, ordered weekly, daily, recent.

    Periodic segments start ⌊l/2⌋-1 points before the same time j days (or w weeks)
    earlier, so each is centered on that time; the recent component is the last
    l·T_r points ending at t.

    Raises:
        OutOfRangeError: t < cfg.min_anchor
    """
    if t < cfg.min_anchor:
        earliest = t - cfg.min_anchor
        raise OutOfRangeError(
            f"anchor {t} lacks history: earliest required index is {earliest}",
            earliest_index=earliest,
        )
    parts = []
    for w in range(cfg.T_w, 0, -1):
        parts.append(_segment(t - 7 * cfg.T_o * w - cfg.half + 1, cfg.l))
    for j in range(cfg.T_d, 0, -1):
        parts.append(_segment(t - cfg.T_o * j - cfg.half + 1, cfg.l))
    parts.append(_segment(t - cfg.l * cfg.T_r + 1, cfg.l * cfg.T_r))
    return np.concatenate(parts)


# --- samples ------------------------------------------------------------------


def calendar_features(
    when: pd.Timestamp, holidays: Set[date], n_stations: int
) -> np.ndarray:
    """[is-weekend, is-holiday] for the given time, repeated for every station (N×2)."""
    flags = np.array(
        [1.0 if when.dayofweek >= 5 else 0.0, 1.0 if when.date() in holidays else 0.0]
    )
    return np.tile(flags, (n_stations, 1))


@dataclass
class Sample:
    """One training instance; X and target are read from the series on demand.

    Attributes:
        anchor: index t of the last input point
        series: the imputed, normalized series the sample indexes into
        cfg: slicing configuration (horizon included)
        features: N×|F| external features
    """

    anchor: int
    series: TrafficSeries = field(repr=False)
    cfg: SliceConfig = field(repr=False)
    features: np.ndarray = field(repr=False)

    @property
    def source_indices(self) -> np.ndarray:
        return slice_indices(self.anchor, self.cfg)

    @property
    def X(self) -> np.ndarray:
        return self.series.values[:, self.source_indices]

    @property
    def target_index(self) -> int:
        return self.anchor + self.cfg.horizon

    @property
    def target(self) -> np.ndarray:
        return self.series.values[:, [self.target_index]]

    @property
    def target_timestamp(self) -> pd.Timestamp:
        return self.series.timestamps[self.target_index]


def build_samples(
    series: TrafficSeries,
    cfg: SliceConfig,
    target_range: Optional[Tuple[int, int]] = None,
    holidays: Optional[Set[date]] = None,
) -> List[Sample]:
    """One Sample per anchor t with full history and target t+k inside ``target_range``.

    Args:
        series: imputed, normalized series
        cfg: slicing configuration
        target_range: [start, stop) of indices where targets may lie; defaults to the
            whole series
        holidays: dates flagged as holidays

    Raises:
        EmptyDatasetError: no anchor qualifies
    """
    holidays = holidays or set()
    start, stop = target_range if target_range is not None else (0, series.n_points)
    stop = min(stop, series.n_points)
    first = max(cfg.min_anchor, start - cfg.horizon)
    last = stop - 1 - cfg.horizon
    if last < first:
        raise EmptyDatasetError(
            f"no samples: targets in [{start}, {stop}) need anchors from {cfg.min_anchor} "
            f"with horizon {cfg.horizon}; series has {series.n_points} points"
        )
    samples = []
    for t in range(first, last + 1):
        features = calendar_features(series.timestamps[t], holidays, series.n_stations)
        samples.append(Sample(anchor=t, series=series, cfg=cfg, features=features))
    return samples


# --- splits -------------------------------------------------------------------


@dataclass
class SeriesSplit:
    """Contiguous train/validation/test partition of one series.

    ``ranges`` holds the [start, stop) global indices of each part; validation and
    test samples are built on the full series with targets confined to their range.
    """

    train: TrafficSeries
    val: TrafficSeries
    test: TrafficSeries
    ranges: Dict[str, Tuple[int, int]]


def split_by_index(series: TrafficSeries, train_stop: int, val_stop: int) -> SeriesSplit:
    if not 0 < train_stop < val_stop < series.n_points:
        raise ConfigError(
            f"split indices must satisfy 0 < train_end ({train_stop}) < val_end "
            f"({val_stop}) < series end ({series.n_points})",
            field="split",
        )
    ranges = {
        "train": (0, train_stop),
        "val": (train_stop, val_stop),
        "test": (val_stop, series.n_points),
    }
    return SeriesSplit(
        train=series.window(*ranges["train"]),
        val=series.window(*ranges["val"]),
        test=series.window(*ranges["test"]),
        ranges=ranges,
    )


def split_by_date(
    series: TrafficSeries,
    train_end: Union[str, datetime, pd.Timestamp],
    val_end: Union[str, datetime, pd.Timestamp],
) -> SeriesSplit:
    """Split at two boundary timestamps.

    The training part holds points before ``train_end``, validation points in
    [train_end, val_end), test points from ``val_end`` on.
    """
    train_end, val_end = pd.Timestamp(train_end), pd.Timestamp(val_end)
    if not train_end < val_end:
        raise ConfigError(f"train_end {train_end} must precede val_end {val_end}", field="split")
    if val_end > series.timestamps[-1]:
        raise ConfigError(
            f"val_end {val_end} is not before the series end {series.timestamps[-1]}",
            field="split.val_end",
        )
    return split_by_index(series, series.index_of(train_end), series.index_of(val_end))


def split_by_fraction(series: TrafficSeries, train_frac: float, val_frac: float) -> SeriesSplit:
    """Split at round(train_frac·n) and round((train_frac+val_frac)·n)."""
    n = series.n_points
    train_stop = int(round(train_frac * n))
    return split_by_index(series, train_stop, int(round((train_frac + val_frac) * n)))


def ingest_report(raw: TrafficSeries) -> Dict:
    """Summary used by ``ingest-check``: grid, coverage and missing cells per station."""
    missing = np.isnan(raw.values).sum(axis=1)
    return {
        "stations": raw.n_stations,
        "points": raw.n_points,
        "granularity_minutes": raw.granularity_minutes,
        "points_per_day": raw.points_per_day,
        "start": str(raw.timestamps[0]),
        "end": str(raw.timestamps[-1]),
        "days": round(raw.n_points / raw.points_per_day, 3),
        "missing_cells": int(missing.sum()),
        "missing_by_station": {
            sid: int(m) for sid, m in zip(raw.station_ids, missing) if m
        },
    }


def iter_batches(items: Sequence, batch_size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), batch_size):
        yield items[i : i + batch_size]
