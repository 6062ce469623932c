"""
Per-plant data pipeline: CSV parsing, cleaning, normalization, sliding
windows, chronological splits, and the synthetic three-plant generator.

Every function here works on a single plant's table. Nothing accepts two
plants' raw tables, so raw rows can never be mixed across plants.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataError

logger = logging.getLogger(__name__)

MAD_TO_STD = 1.4826
STD_FLOOR = 1e-8
DEFAULT_FEATURES = ("temperature", "pressure", "flow", "concentration")
DEFAULT_TARGETS = ("yield",)


@dataclass(frozen=True, eq=False)
class RawPlantTable:
    """Time-indexed measurements of one plant. NaN marks a missing cell."""

    plant_id: str
    frame: pd.DataFrame

    @property
    def column_names(self) -> List[str]:
        return list(self.frame.columns)

    @property
    def timestamp_name(self) -> str:
        return str(self.frame.index.name or "timestamp")

    def __len__(self) -> int:
        return len(self.frame)

    def equals(self, other: "RawPlantTable") -> bool:
        return self.plant_id == other.plant_id and self.frame.equals(other.frame)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    feature_columns: Tuple[str, ...]
    target_columns: Tuple[str, ...]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    warnings: Tuple[str, ...] = ()

    def denormalize_targets(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.target_std + self.target_mean


class WindowSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    window_length: int = Field(4, ge=1)
    feature_columns: Tuple[str, ...] = DEFAULT_FEATURES
    target_columns: Tuple[str, ...] = DEFAULT_TARGETS
    horizon: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _columns_disjoint(self) -> "WindowSpec":
        if not self.feature_columns or not self.target_columns:
            raise ValueError("feature_columns and target_columns must be nonempty")
        overlap = set(self.feature_columns) & set(self.target_columns)
        if overlap:
            raise ValueError(f"columns used as feature and target: {sorted(overlap)}")
        return self


@dataclass(frozen=True, eq=False)
class PlantDataset:
    plant_id: str
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise DataError("inputs and targets must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise DataError(
                f"{self.plant_id}: {x.shape[0]} input rows vs {y.shape[0]} target rows"
            )
        if x.shape[0] < 1:
            raise DataError(f"{self.plant_id}: dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError(f"{self.plant_id}: dataset contains missing or non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class SplitDataset:
    train: PlantDataset
    test: PlantDataset
    split_fraction: float


@dataclass(frozen=True)
class PreparedPlant:
    """A plant's data after the full local pipeline; it never leaves the plant."""

    split: SplitDataset
    stats: NormalizationStats
    # timestamp of each test target row, as written in the CSV
    test_times: Tuple[str, ...] = ()


def _parse_timestamps(raw: List[str]) -> pd.Index:
    try:
        return pd.Index([int(v) for v in raw], dtype="int64")
    except ValueError:
        pass
    try:
        return pd.DatetimeIndex(pd.to_datetime(raw, format="ISO8601"))
    except (ValueError, TypeError) as e:
        raise DataError(f"unparseable timestamp column: {e}") from e


def parse_csv(data: bytes, plant_id: str) -> RawPlantTable:
    """
    Parse one plant's CSV export.

    The first row is the header and the first column the timestamp (integer
    or ISO-8601). Empty or non-numeric cells become NaN, never zero.
    """
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise DataError(f"{plant_id}: CSV is not UTF-8: {e}") from e
    rows = [row for row in csv.reader(io.StringIO(text)) if row]
    if not rows:
        raise DataError(f"{plant_id}: empty CSV")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise DataError(f"{plant_id}: header needs a timestamp and at least one column")
    if not body:
        raise DataError(f"{plant_id}: CSV has a header but no rows")
    for line_no, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(
                f"{plant_id}: ragged row at line {line_no} "
                f"({len(row)} fields, header has {len(header)})"
            )

    index = _parse_timestamps([row[0].strip() for row in body])
    index.name = header[0].strip()
    if not index.is_unique or not index.is_monotonic_increasing:
        raise DataError(f"{plant_id}: timestamps must be strictly increasing")

    columns = [name.strip() for name in header[1:]]
    frame = pd.DataFrame([row[1:] for row in body], columns=columns, index=index)
    frame = frame.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    frame = frame.astype(np.float64).replace([np.inf, -np.inf], np.nan)
    return RawPlantTable(plant_id, frame)


def _outlier_mask(frame: pd.DataFrame, columns: Sequence[str], k_out: float) -> pd.Series:
    flagged = pd.Series(False, index=frame.index)
    for col in columns:
        values = frame[col]
        median = values.median()
        robust_std = MAD_TO_STD * (values - median).abs().median()
        if robust_std == 0:
            continue
        flagged |= (values - median).abs() > k_out * robust_std
    return flagged


def clean(
    table: RawPlantTable,
    feature_columns: Optional[Sequence[str]] = None,
    k_out: float = 5.0,
) -> RawPlantTable:
    """
    Drop rows with missing cells, then drop median/MAD outliers.

    Outlier removal repeats until no row is flagged, so the result is a fixed
    point: clean(clean(t)) == clean(t). Columns whose MAD is zero are skipped.
    """
    frame = table.frame.dropna(how="any")
    columns = list(feature_columns) if feature_columns else list(frame.columns)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{table.plant_id}: unknown columns {missing}")

    while len(frame):
        flagged = _outlier_mask(frame, columns, k_out)
        if not flagged.any():
            break
        logger.debug("%s: dropping %d outlier rows", table.plant_id, int(flagged.sum()))
        frame = frame[~flagged]

    if frame.empty:
        raise DataError(f"{table.plant_id}: cleaning removed every row")
    dropped = len(table) - len(frame)
    if dropped:
        logger.info("%s: cleaning dropped %d of %d rows", table.plant_id, dropped, len(table))
    return RawPlantTable(table.plant_id, frame)


def _column_stats(
    frame: pd.DataFrame, columns: Sequence[str], plant_id: str, warnings: List[str]
) -> Tuple[np.ndarray, np.ndarray]:
    values = frame[list(columns)].to_numpy(dtype=np.float64)
    mean = values.mean(axis=0) if len(columns) else np.zeros(0)
    std = values.std(axis=0, ddof=0) if len(columns) else np.zeros(0)
    for i, col in enumerate(columns):
        if std[i] < STD_FLOOR:
            msg = f"{plant_id}: column '{col}' has zero variance; std clamped to {STD_FLOOR}"
            logger.warning(msg)
            warnings.append(msg)
            std[i] = STD_FLOOR
    return mean, std


def fit_normalization(
    train_rows: RawPlantTable,
    feature_columns: Sequence[str],
    target_columns: Sequence[str],
) -> NormalizationStats:
    """Z-score statistics (population std) from a cleaned training slice."""
    if len(train_rows) == 0:
        raise DataError(f"{train_rows.plant_id}: cannot fit normalization on zero rows")
    if train_rows.frame[list(feature_columns) + list(target_columns)].isna().any().any():
        raise DataError(f"{train_rows.plant_id}: fit_normalization needs cleaned rows")
    warnings: List[str] = []
    f_mean, f_std = _column_stats(train_rows.frame, feature_columns, train_rows.plant_id, warnings)
    t_mean, t_std = _column_stats(train_rows.frame, target_columns, train_rows.plant_id, warnings)
    return NormalizationStats(
        feature_columns=tuple(feature_columns),
        target_columns=tuple(target_columns),
        feature_mean=f_mean,
        feature_std=f_std,
        target_mean=t_mean,
        target_std=t_std,
        warnings=tuple(warnings),
    )


def apply_normalization(rows: RawPlantTable, stats: NormalizationStats) -> RawPlantTable:
    frame = rows.frame.copy()
    for cols, mean, std in (
        (stats.feature_columns, stats.feature_mean, stats.feature_std),
        (stats.target_columns, stats.target_mean, stats.target_std),
    ):
        if cols:
            frame[list(cols)] = (frame[list(cols)].to_numpy(dtype=np.float64) - mean) / std
    return RawPlantTable(rows.plant_id, frame)


def window_count(n_rows: int, window_length: int, horizon: int) -> int:
    return n_rows - window_length + 1 - horizon


def make_windows(table: RawPlantTable, spec: WindowSpec) -> PlantDataset:
    """
    Input i is [x_{i-T+1}, ..., x_i] flattened oldest first; its target is the
    target row at i + horizon.
    """
    needed = spec.window_length + spec.horizon
    if len(table) < needed:
        raise DataError(
            f"{table.plant_id}: {len(table)} rows, windows need at least {needed}"
        )
    missing = [
        c for c in (*spec.feature_columns, *spec.target_columns) if c not in table.frame.columns
    ]
    if missing:
        raise DataError(f"{table.plant_id}: missing columns {missing}")

    features = table.frame[list(spec.feature_columns)].to_numpy(dtype=np.float64)
    targets = table.frame[list(spec.target_columns)].to_numpy(dtype=np.float64)
    n = window_count(len(table), spec.window_length, spec.horizon)

    # (rows - T + 1, d, T) -> (n, T, d) so each flattened row is time-major
    windows = sliding_window_view(features, spec.window_length, axis=0)[:n]
    inputs = windows.transpose(0, 2, 1).reshape(n, -1)
    start = spec.window_length - 1 + spec.horizon
    return PlantDataset(table.plant_id, inputs, targets[start : start + n])


def _index_labels(index: pd.Index) -> Tuple[str, ...]:
    if isinstance(index, pd.DatetimeIndex):
        return tuple(index.strftime("%Y-%m-%dT%H:%M:%S"))
    return tuple(str(v) for v in index)


def _train_count(n: int, fraction: float) -> int:
    return math.ceil(fraction * n - 1e-9)


def chrono_split(dataset: PlantDataset, fraction: float) -> SplitDataset:
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must be in (0, 1), got {fraction}")
    n = dataset.n_samples
    if n < 2:
        raise DataError(f"{dataset.plant_id}: need at least 2 samples to split, have {n}")
    n_train = _train_count(n, fraction)
    if n_train < 1 or n_train >= n:
        raise DataError(
            f"{dataset.plant_id}: fraction {fraction} of {n} samples leaves an empty side"
        )
    train = PlantDataset(dataset.plant_id, dataset.inputs[:n_train], dataset.targets[:n_train])
    test = PlantDataset(dataset.plant_id, dataset.inputs[n_train:], dataset.targets[n_train:])
    return SplitDataset(train, test, fraction)


def prepare_plant(
    table: RawPlantTable,
    spec: WindowSpec,
    split_fraction: float = 0.8,
    k_out: float = 5.0,
) -> PreparedPlant:
    """
    Full local pipeline for one plant.

    Feature statistics come from the rows inside training windows and target
    statistics from the training targets only, so no test row is seen.
    """
    cleaned = clean(table, spec.feature_columns, k_out)
    n_windows = window_count(len(cleaned), spec.window_length, spec.horizon)
    if n_windows < 2:
        raise DataError(
            f"{table.plant_id}: only {max(n_windows, 0)} windows after cleaning"
        )
    n_train = _train_count(n_windows, split_fraction)
    feature_end = n_train + spec.window_length - 1
    target_start = spec.window_length - 1 + spec.horizon
    features = fit_normalization(
        RawPlantTable(cleaned.plant_id, cleaned.frame.iloc[:feature_end]),
        spec.feature_columns,
        (),
    )
    targets = fit_normalization(
        RawPlantTable(
            cleaned.plant_id, cleaned.frame.iloc[target_start : target_start + n_train]
        ),
        (),
        spec.target_columns,
    )
    stats = replace(
        features,
        target_columns=targets.target_columns,
        target_mean=targets.target_mean,
        target_std=targets.target_std,
        warnings=features.warnings + targets.warnings,
    )
    dataset = make_windows(apply_normalization(cleaned, stats), spec)
    split = chrono_split(dataset, split_fraction)
    test_index = cleaned.frame.index[target_start + n_train : target_start + n_windows]
    return PreparedPlant(split, stats, _index_labels(test_index))


# ---------------------------------------------------------------------------
# Synthetic plants
# ---------------------------------------------------------------------------


class PlantRegime(BaseModel):
    """Operating regime of one synthetic plant."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    n_samples: int = Field(600, ge=8)
    gain_sin: float = 12.0
    gain_pressure: float = 1.5
    gain_coupling: float = 2.0
    offset: float = 70.0
    temperature_range: Tuple[float, float] = (330.0, 370.0)
    pressure_range: Tuple[float, float] = (8.0, 12.0)
    flow_range: Tuple[float, float] = (40.0, 60.0)
    concentration_range: Tuple[float, float] = (0.8, 1.2)

    @model_validator(mode="after")
    def _ranges_ordered(self) -> "PlantRegime":
        for label in ("temperature", "pressure", "flow", "concentration"):
            lo, hi = getattr(self, f"{label}_range")
            if not lo < hi:
                raise ValueError(f"{self.name}: {label}_range must satisfy low < high")
        return self

    def _ranges(self) -> np.ndarray:
        return np.asarray(
            [
                self.temperature_range,
                self.pressure_range,
                self.flow_range,
                self.concentration_range,
            ]
        )

    @property
    def midpoints(self) -> np.ndarray:
        return self._ranges().mean(axis=1)

    @property
    def half_widths(self) -> np.ndarray:
        lo, hi = self._ranges().T
        return 0.5 * (hi - lo)


def default_regimes() -> List[PlantRegime]:
    # gains keep one ratio across plants; ranges, offsets and scale differ
    return [
        PlantRegime(name="A", n_samples=600, offset=72.0),
        PlantRegime(
            name="B",
            n_samples=72,
            gain_sin=10.8,
            gain_pressure=1.35,
            gain_coupling=1.8,
            offset=65.0,
            temperature_range=(340.0, 380.0),
            pressure_range=(9.0, 13.0),
        ),
        PlantRegime(
            name="C",
            n_samples=600,
            gain_sin=13.2,
            gain_pressure=1.65,
            gain_coupling=2.2,
            offset=78.0,
            temperature_range=(350.0, 390.0),
            flow_range=(45.0, 65.0),
        ),
    ]


class SyntheticConfig(BaseModel):
    """Generator settings shared by every plant."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    plants: Tuple[PlantRegime, ...] = Field(default_factory=lambda: tuple(default_regimes()))
    noise_std: float = Field(0.5, ge=0.0)
    missing_fraction: float = Field(0.01, ge=0.0, lt=1.0)
    smoothness: float = Field(0.3, ge=0.0, lt=1.0)
    start: str = "2024-01-01T00:00:00"

    @model_validator(mode="after")
    def _unique_names(self) -> "SyntheticConfig":
        if not self.plants:
            raise ValueError("synthetic config needs at least one plant")
        names = [p.name for p in self.plants]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate plant names: {names}")
        return self


def _operating_trajectory(
    rng: np.random.Generator, n: int, low: float, high: float, smoothness: float
) -> np.ndarray:
    """AR(1) drift mapped into [low, high]."""
    shocks = rng.standard_normal(n)
    state = np.empty(n)
    state[0] = shocks[0]
    innovation = math.sqrt(1.0 - smoothness**2)
    for i in range(1, n):
        state[i] = smoothness * state[i - 1] + innovation * shocks[i]
    unit = 0.5 * (1.0 + np.tanh(state / 1.5))
    return low + (high - low) * unit


def generate_synthetic_plants(
    config: SyntheticConfig, seed: int
) -> Tuple[RawPlantTable, ...]:
    """
    Simulate y = a*sin(0.8*T~) + b*P~^2 + c*F~*C~ + d + noise per plant.

    Tilded inputs are centred on the plant's own operating range and scaled
    by its half-width, so they lie in (-1, 1); the plants differ in gains,
    offset and operating ranges.
    """
    root = np.random.SeedSequence(seed & ((1 << 64) - 1))
    tables = []
    for regime, child in zip(config.plants, root.spawn(len(config.plants))):
        rng = np.random.default_rng(child)
        n = regime.n_samples
        raw = np.column_stack(
            [
                _operating_trajectory(rng, n, *regime.temperature_range, config.smoothness),
                _operating_trajectory(rng, n, *regime.pressure_range, config.smoothness),
                _operating_trajectory(rng, n, *regime.flow_range, config.smoothness),
                _operating_trajectory(rng, n, *regime.concentration_range, config.smoothness),
            ]
        )
        t, p, f, c = ((raw - regime.midpoints) / regime.half_widths).T
        target = (
            regime.gain_sin * np.sin(0.8 * t)
            + regime.gain_pressure * p**2
            + regime.gain_coupling * f * c
            + regime.offset
            + config.noise_std * rng.standard_normal(n)
        )
        values = np.column_stack([raw, target])
        if config.missing_fraction > 0:
            blank = rng.random(values.shape) < config.missing_fraction
            values = np.where(blank, np.nan, values)

        index = pd.date_range(config.start, periods=n, freq="min", name="timestamp")
        frame = pd.DataFrame(values, index=index, columns=[*DEFAULT_FEATURES, *DEFAULT_TARGETS])
        tables.append(RawPlantTable(regime.name, frame))
    return tuple(tables)


def table_to_csv(table: RawPlantTable) -> bytes:
    """Serialize in the same layout parse_csv reads."""
    frame = table.frame.copy()
    if isinstance(frame.index, pd.DatetimeIndex):
        frame.index = frame.index.strftime("%Y-%m-%dT%H:%M:%S")
    frame.index.name = table.timestamp_name
    text = frame.to_csv(float_format="%.6f", na_rep="", lineterminator="\n")
    return text.encode("utf-8")
