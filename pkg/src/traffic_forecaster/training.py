"""Loss, RMSProp, learning-rate schedule, training loop and evaluation metrics."""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from . import tensor as tc
from .data import Sample, ZScoreScaler, iter_batches
from .errors import DimensionError, EmptyDatasetError, NumericalError
from .model import HybridGraphModel, bind_parameters, forward_batch, predict
from .tensor import DiffTensor, Tape

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """Optimization settings.

    Attributes:
        alpha: weight of the MAE term in the loss
        lr0: initial learning rate
        decay: multiplicative decay applied every ``decay_every`` epochs
        epochs: number of passes over the training set
        batch_size: samples per optimizer step
        rho, eps: RMSProp smoothing constant and denominator offset
        seed: shuffling seed
        clip_norm: clip the global gradient norm to this value (None disables)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(1e-4, gt=0)
    lr0: float = Field(1e-3, gt=0)
    decay: float = Field(0.7, gt=0, lt=1)
    decay_every: int = Field(5, gt=0)
    epochs: int = Field(50, gt=0)
    batch_size: int = Field(32, gt=0)
    rho: float = Field(0.9, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    clip_norm: Optional[float] = Field(None, gt=0)


# --- loss -----------------------------------------------------------------------


def loss(pred: DiffTensor, target, alpha: float) -> DiffTensor:
    """mean((x̂−x)²) + α·mean(|x̂−x|) over every station and sample in the batch."""
    pred, target = tc.as_tensor(pred), tc.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = tc.subtract(pred, target)
    mse = tc.reduce_mean(tc.square(diff))
    mae = tc.reduce_mean(tc.absolute(diff))
    return tc.add(mse, tc.scale(mae, alpha))


# --- optimizer ------------------------------------------------------------------


@dataclass
class OptState:
    """Running mean of squared gradients, one array per parameter."""

    square_avg: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def rmsprop_step(param, grad, s, lr: float, rho: float, eps: float):
    """One RMSProp update.

    s ← ρs + (1−ρ)g²; param ← param − lr·g/(√s + eps)

    Returns:
        (new param, new s)
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise NumericalError(
            f"non-finite gradient ({int((~np.isfinite(grad)).sum())} entries); step aborted"
        )
    s = rho * s + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(s) + eps), s


class RMSProp:
    """Applies ``rmsprop_step`` in place to a model's live parameter arrays."""

    def __init__(self, params: Dict[str, np.ndarray], rho: float = 0.9, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.state = OptState.zeros_like(params)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        for name in grads:
            if not np.isfinite(grads[name]).all():
                raise NumericalError(f"non-finite gradient for {name}; step aborted")
        for name, param in params.items():
            new, self.state.square_avg[name] = rmsprop_step(
                param, grads[name], self.state.square_avg[name], lr, self.rho, self.eps
            )
            param[...] = new


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 · decay^⌊epoch/decay_every⌋."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


# --- metrics --------------------------------------------------------------------


@dataclass
class Metrics:
    rmse: float
    mae: float

    def to_json(self, horizon: int) -> Dict:
        return {"horizon_steps": horizon, "rmse": self.rmse, "mae": self.mae}


def error_metrics(pred: np.ndarray, true: np.ndarray) -> Metrics:
    """RMSE and MAE over every station and time step."""
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {true.shape} differ")
    if pred.size == 0:
        raise EmptyDatasetError("no predictions to score")
    err = pred - true
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    if rmse < mae * (1 - 1e-12):
        raise NumericalError(f"RMSE {rmse} below MAE {mae}")
    return Metrics(rmse=rmse, mae=mae)


def evaluate(
    model: HybridGraphModel, samples: Sequence[Sample], scaler: Optional[ZScoreScaler] = None
) -> Metrics:
    """Score predictions in raw units (the scaler is inverted first when given)."""
    if not samples:
        raise EmptyDatasetError("evaluation set is empty")
    pred = predict(model, samples)
    true = np.stack([s.target for s in samples])
    if scaler is not None:
        pred, true = scaler.invert(pred), scaler.invert(true)
    return error_metrics(pred, true)


# --- training loop --------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    lr: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "train_loss", "val_rmse", "lr"]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


@dataclass
class FitResult:
    model: HybridGraphModel
    log: TrainingLog
    best_epoch: int
    best_val_rmse: float


def train_step(
    model: HybridGraphModel, batch: Sequence[Sample], cfg: TrainConfig
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Forward, loss and backward on one batch; returns (loss, gradients)."""
    tape = Tape()
    params = bind_parameters(tape, model)
    pred = forward_batch(model, batch, tape=tape, params=params)
    target = np.concatenate([s.target for s in batch])
    batch_loss = loss(pred, target, cfg.alpha)
    return batch_loss.item(), tc.backward(tape, batch_loss)


def fit(
    model: HybridGraphModel,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    scaler: Optional[ZScoreScaler] = None,
) -> FitResult:
    """Train with RMSProp and keep the parameters with the best validation RMSE.

    Raises:
        EmptyDatasetError: empty training or validation set
        NumericalError: non-finite loss (carries the batch index)
    """
    if not train_set or not val_set:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = RMSProp(model.parameters(), rho=cfg.rho, eps=cfg.eps)
    log = TrainingLog()
    best_rmse, best_epoch, best_params = math.inf, -1, model.snapshot()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        total, count = 0.0, 0
        for batch_index, batch in enumerate(iter_batches(shuffled, cfg.batch_size)):
            batch_loss, grads = train_step(model, batch, cfg)
            if not math.isfinite(batch_loss):
                raise NumericalError(
                    f"loss is {batch_loss} at epoch {epoch}, batch {batch_index}",
                    batch_index=batch_index,
                )
            if cfg.clip_norm is not None:
                clip_gradients(grads, cfg.clip_norm)
            optimizer.step(model.parameters(), grads, lr)
            total += batch_loss * len(batch)
            count += len(batch)

        val_rmse = evaluate(model, val_set, scaler).rmse
        record = EpochRecord(epoch=epoch, train_loss=total / count, val_rmse=val_rmse, lr=lr)
        log.records.append(record)
        logger.info(
            "epoch %d  train_loss=%.6f  val_rmse=%.6f  lr=%.3g",
            epoch,
            record.train_loss,
            val_rmse,
            lr,
        )
        if val_rmse < best_rmse:
            best_rmse, best_epoch, best_params = val_rmse, epoch, model.snapshot()

    model.load_parameters(best_params)
    logger.info("best validation RMSE %.6f at epoch %d", best_rmse, best_epoch)
    return FitResult(model=model, log=log, best_epoch=best_epoch, best_val_rmse=best_rmse)
