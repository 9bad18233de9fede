"""Reference predictors: weekly historical average and seasonal naive."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data import TrafficSeries
from .errors import EmptyDatasetError, OutOfRangeError
from .training import Metrics, error_metrics

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7


@dataclass
class HAState:
    """Per-station means for every weekly slot of the training range (raw units).

    Attributes:
        means: N×(7·T_o) slot means; NaN where a slot was never observed
        counts: N×(7·T_o) number of observations behind each mean
        node_mean: N overall training means, used for unseen slots
        points_per_day: T_o
        origin: timestamp of global index 0
        granularity_minutes: grid step
    """

    means: np.ndarray
    counts: np.ndarray
    node_mean: np.ndarray
    points_per_day: int
    origin: pd.Timestamp
    granularity_minutes: int

    @property
    def period(self) -> int:
        return DAYS_PER_WEEK * self.points_per_day

    def index_of(self, when: Union[int, str, pd.Timestamp]) -> int:
        if isinstance(when, (int, np.integer)):
            return int(when)
        delta = pd.Timestamp(when) - self.origin
        return int(delta // pd.Timedelta(minutes=self.granularity_minutes))


def ha_fit(train: TrafficSeries) -> HAState:
    """Average each station's training values by weekly slot (global index mod 7·T_o).

    Missing cells (NaN) are skipped.

    Raises:
        EmptyDatasetError: no observed training value
    """
    values = train.values
    observed = ~np.isnan(values)
    if values.size == 0 or not observed.any():
        raise EmptyDatasetError("cannot fit the historical average on empty training data")
    T_o = train.points_per_day
    period = DAYS_PER_WEEK * T_o
    if train.n_points < period:
        logger.warning(
            "Historical average fitted on %d points (< one week); unseen slots use node means",
            train.n_points,
        )

    slots = (train.offset + np.arange(train.n_points)) % period
    sums = np.zeros((train.n_stations, period))
    counts = np.zeros((train.n_stations, period))
    np.add.at(sums, (slice(None), slots), np.where(observed, values, 0.0))
    np.add.at(counts, (slice(None), slots), observed.astype(np.float64))

    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        totals = observed.sum(axis=1)
        node_mean = np.where(
            totals > 0, np.where(observed, values, 0.0).sum(axis=1) / np.maximum(totals, 1), 0.0
        )
    origin = train.timestamps[0] - pd.Timedelta(minutes=train.granularity_minutes * train.offset)
    return HAState(means, counts, node_mean, T_o, origin, train.granularity_minutes)


def ha_predict(state: HAState, target: Union[int, str, pd.Timestamp]) -> np.ndarray:
    """N×1 slot means for the target's weekly slot; node means where the slot is unseen.

    ``target`` is a global index or a timestamp. The result does not depend on the horizon.
    """
    slot = state.index_of(target) % state.period
    column = state.means[:, slot]
    return np.where(np.isnan(column), state.node_mean, column).reshape(-1, 1)


def seasonal_naive_predict(
    series: TrafficSeries, t: int, k: int, period: Optional[int] = None
) -> np.ndarray:
    """x̂^{t+k} = x^{t+k−period} (N×1); period defaults to one week.

    Raises:
        OutOfRangeError: t + k − period < 0
    """
    period = period or DAYS_PER_WEEK * series.points_per_day
    source = t + k - period
    if source < 0:
        raise OutOfRangeError(
            f"seasonal naive needs index {source} for t={t}, k={k}, period={period}",
            earliest_index=source,
        )
    return series.values[:, [source]].copy()


def baseline_predictions(
    state: HAState, series: TrafficSeries, anchors: Sequence[int], k: int
) -> Dict[str, np.ndarray]:
    """B×N×1 predictions of both baselines for targets anchor + k (local indices)."""
    ha = np.stack([ha_predict(state, series.offset + t + k) for t in anchors])
    naive = np.stack([seasonal_naive_predict(series, t, k) for t in anchors])
    return {"ha": ha, "seasonal_naive": naive}


def baseline_metrics(
    state: HAState, series: TrafficSeries, anchors: Sequence[int], k: int
) -> Dict[str, Metrics]:
    """RMSE/MAE of both baselines against ``series`` (raw units) at targets anchor + k."""
    if not len(anchors):
        raise EmptyDatasetError("no anchors to score the baselines on")
    truth = np.stack([series.values[:, [t + k]] for t in anchors])
    preds = baseline_predictions(state, series, anchors, k)
    return {name: error_metrics(pred, truth) for name, pred in preds.items()}
