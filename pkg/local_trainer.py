"""
One plant's local training phase and the evaluation metrics (MSE, MAE, R^2).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from data_pipeline import NormalizationStats, PlantDataset, PreparedPlant
from errors import DataError, DivergenceError
from model_core import (
    ModelArchitecture,
    ParameterVector,
    loss_gradient,
    predict,
    sgd_step,
)

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


class LocalTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    # 0 is allowed and means "return the received model unchanged"
    eta: float = Field(0.01, ge=0.0)
    shuffle_seed: int = 0


@dataclass(frozen=True)
class LocalUpdate:
    """Everything a plant reveals after training: parameters, N_k and one loss."""

    plant_id: int
    params: ParameterVector
    n_samples: int
    train_loss_final: float


@dataclass(frozen=True)
class EvalMetrics:
    mse: float
    mae: float
    r2: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "r2": self.r2}


def _epoch_order(n: int, shuffle_seed: int, epoch_index: int) -> np.ndarray:
    rng = np.random.default_rng((shuffle_seed & _SEED_MASK, epoch_index))
    return rng.permutation(n)


def train_epochs(
    params: ParameterVector,
    arch: ModelArchitecture,
    train_set: PlantDataset,
    cfg: LocalTrainConfig,
    epochs: Optional[int] = None,
    epoch_offset: int = 0,
    label: str = "",
) -> Tuple[ParameterVector, List[float]]:
    """
    Mini-batch SGD for `epochs` passes (cfg.epochs if omitted).

    Epoch e shuffles with (shuffle_seed, epoch_offset + e). Rows inside a batch
    keep ascending order, so a single full batch is exactly the full-batch
    gradient. The final short batch is kept.

    Returns:
        The trained parameters and the mean per-sample loss of every epoch.
    """
    label = label or train_set.plant_id
    n = train_set.n_samples
    x, y = train_set.inputs, train_set.targets
    theta = params
    epoch_losses: List[float] = []
    for e in range(cfg.epochs if epochs is None else epochs):
        epoch_index = epoch_offset + e
        order = _epoch_order(n, cfg.shuffle_seed, epoch_index)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            try:
                loss, grad = loss_gradient(theta, arch, x[idx], y[idx])
                theta = sgd_step(theta, grad, cfg.eta)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"plant {label} diverged in epoch {epoch_index}: {exc}"
                ) from exc
            total += loss * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(
                f"plant {label} diverged in epoch {epoch_index}: loss is {mean_loss}"
            )
        epoch_losses.append(mean_loss)
        logger.debug("%s epoch %d loss %.6f", label, epoch_index, mean_loss)
    return theta, epoch_losses


def train_local(
    global_params: ParameterVector,
    arch: ModelArchitecture,
    train_set: PlantDataset,
    cfg: LocalTrainConfig,
    plant_id: int = 0,
    epoch_offset: int = 0,
) -> LocalUpdate:
    """Start from the received global model and run cfg.epochs local epochs."""
    theta, losses = train_epochs(
        global_params,
        arch,
        train_set,
        cfg,
        epoch_offset=epoch_offset,
        label=train_set.plant_id,
    )
    return LocalUpdate(
        plant_id=plant_id,
        params=theta,
        n_samples=train_set.n_samples,
        train_loss_final=losses[-1],
    )


def regression_metrics(predictions, targets) -> EvalMetrics:
    """
    MSE sums squared error over outputs and averages over samples; MAE
    averages |error| over both; R^2 = 1 - SSE/SST with SST around the
    per-output mean of the targets.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(targets, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.shape != truth.shape or pred.shape[0] == 0:
        raise DataError(f"cannot score predictions {pred.shape} against {truth.shape}")

    residual = pred - truth
    sse = float(np.sum(residual**2))
    mse = sse / pred.shape[0]
    mae = float(np.mean(np.sum(np.abs(residual), axis=1) / pred.shape[1]))
    sst = float(np.sum((truth - truth.mean(axis=0)) ** 2))
    if sst == 0.0:
        if sse == 0.0:
            return EvalMetrics(mse=mse, mae=mae, r2=1.0)
        raise DataError("R^2 undefined: test targets are constant")
    return EvalMetrics(mse=mse, mae=mae, r2=1.0 - sse / sst)


def evaluate(
    params: ParameterVector,
    arch: ModelArchitecture,
    test_set: PlantDataset,
    norm_stats: Optional[NormalizationStats],
) -> EvalMetrics:
    """Score in de-normalized target units (normalized units if stats is None)."""
    pred = predict(params, arch, test_set.inputs)
    truth = test_set.targets
    if norm_stats is not None:
        pred = norm_stats.denormalize_targets(pred)
        truth = norm_stats.denormalize_targets(truth)
    return regression_metrics(pred, truth)


def prediction_frame(
    params: ParameterVector,
    arch: ModelArchitecture,
    prepared: PreparedPlant,
) -> pd.DataFrame:
    """
    The model's test-split predictions next to the truth, in original units.

    Columns are plant, t, y_true, y_pred; with several targets the value
    columns become y_true_<name> and y_pred_<name>. Built inside the plant that
    owns the data.
    """
    split, stats = prepared.split, prepared.stats
    test = split.test
    pred = stats.denormalize_targets(predict(params, arch, test.inputs))
    truth = stats.denormalize_targets(test.targets)
    times = prepared.test_times or tuple(str(i) for i in range(test.n_samples))
    if len(times) != test.n_samples:
        raise DataError(
            f"{test.plant_id}: {len(times)} timestamps for {test.n_samples} test rows"
        )

    columns = {"plant": [test.plant_id] * test.n_samples, "t": list(times)}
    if len(stats.target_columns) == 1:
        columns["y_true"] = truth[:, 0]
        columns["y_pred"] = pred[:, 0]
    else:
        for i, name in enumerate(stats.target_columns):
            columns[f"y_true_{name}"] = truth[:, i]
            columns[f"y_pred_{name}"] = pred[:, i]
    return pd.DataFrame(columns)


def predictions_to_csv(frame: pd.DataFrame) -> bytes:
    return frame.to_csv(index=False, float_format="%.6f", lineterminator="\n").encode("utf-8")
