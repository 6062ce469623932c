"""
Global coordination layer.

The coordinator schedules communication rounds, computes aggregation weights,
drives the plants through the session protocol, aggregates their updates
(pairwise-masked or plaintext) and records convergence. The centralized and
local-only baselines live here too so the three paradigms share one optimizer
and one seed discipline.
"""

import asyncio
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import FederatedConfig
from data_pipeline import PlantDataset, PreparedPlant, RawPlantTable, prepare_plant
from errors import ConfigError, ContractError, DataError, DivergenceError, FedPlantError, ProtocolFailure
from local_trainer import EvalMetrics, evaluate, prediction_frame, train_epochs
from model_core import ParameterVector, deserialize_params, init_params, serialize_params
from secure_aggregation import aggregate_masked
from servers.plant.server import PlantClient
from transport import (
    ErrorCode,
    EvalReport,
    EvalRequest,
    FederationServer,
    GlobalModel,
    JoinAccept,
    JoinRequest,
    LocalUpdateMasked,
    LocalUpdatePlain,
    ProtocolError,
    RoundAck,
    Shutdown,
    connect,
    serve,
)

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12
_federation_ids = itertools.count(1)


@dataclass(frozen=True)
class AggregationWeights:
    weights: Dict[int, float]

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("no plants to weight")
        bad = {k: w for k, w in self.weights.items() if not 0.0 < w <= 1.0}
        if bad:
            raise ContractError(f"aggregation weights outside (0, 1]: {bad}")
        total = math.fsum(self.weights.values())
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ContractError(f"aggregation weights sum to {total!r}, not 1")

    def __getitem__(self, plant_id: int) -> float:
        return self.weights[plant_id]

    def named(self, names: Mapping[int, str]) -> Dict[str, float]:
        return {names[k]: w for k, w in sorted(self.weights.items())}


@dataclass(frozen=True)
class AlphaCoefficients:
    alphas: Dict[int, float]

    def __post_init__(self):
        if not self.alphas:
            raise ConfigError("no alpha coefficients")
        bad = {k: a for k, a in self.alphas.items() if not (a > 0 and math.isfinite(a))}
        if bad:
            raise ConfigError(f"alpha coefficients must be positive and finite: {bad}")

    def __getitem__(self, plant_id: int) -> float:
        return self.alphas[plant_id]


@dataclass(frozen=True)
class RoundRecord:
    t: int
    global_train_mse: float
    per_plant_test_mse: Dict[int, float]
    weights_used: AggregationWeights
    wall_time_ms: float
    per_plant_train_mse: Dict[int, float] = field(default_factory=dict)
    alphas: Optional[Dict[int, float]] = None

    def __post_init__(self):
        values = [self.global_train_mse, *self.per_plant_test_mse.values()]
        values += list(self.per_plant_train_mse.values())
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(f"round {self.t} produced non-finite metrics")

    def to_log(self, names: Mapping[int, str]) -> dict:
        """JSON line for rounds.jsonl. Wall time is kept out so reruns match byte for byte."""
        return {
            "t": self.t,
            "global_train_mse": self.global_train_mse,
            "per_plant_test_mse": {names[k]: v for k, v in sorted(self.per_plant_test_mse.items())},
            "per_plant_train_mse": {
                names[k]: v for k, v in sorted(self.per_plant_train_mse.items())
            },
            "weights": self.weights_used.named(names),
            "alphas": (
                None
                if self.alphas is None
                else {names[k]: v for k, v in sorted(self.alphas.items())}
            ),
        }


@dataclass
class FederatedResult:
    final_params: ParameterVector
    records: List[RoundRecord]
    initial_train_mse: float
    initial_reports: Dict[int, EvalReport]
    final_reports: Dict[int, EvalReport]
    updates_received: int
    # test predictions of the final model, built by each in-process plant
    predictions: Optional[pd.DataFrame] = None


@dataclass(frozen=True)
class CentralizedResult:
    params: ParameterVector
    epoch_losses: List[float]
    metrics: Dict[str, EvalMetrics]
    sample_counts: Dict[str, Tuple[int, int]]
    predictions: Optional[pd.DataFrame] = None


@dataclass(frozen=True)
class LocalOnlyResult:
    params: ParameterVector
    metrics: EvalMetrics
    epoch_losses: List[float]
    n_train: int
    n_test: int
    predictions: Optional[pd.DataFrame] = None


# ---------------------------------------------------------------------------
# Aggregation weights
# ---------------------------------------------------------------------------


def _check_counts(sample_counts: Mapping[int, int]) -> None:
    if not sample_counts:
        raise ConfigError("cannot weight an empty plant list")
    bad = {k: n for k, n in sample_counts.items() if n < 1}
    if bad:
        raise ContractError(f"sample counts must be >= 1: {bad}")


def fedavg_weights(sample_counts: Mapping[int, int]) -> AggregationWeights:
    """w_k = N_k / sum_j N_j."""
    _check_counts(sample_counts)
    total = sum(sample_counts.values())
    return AggregationWeights({k: sample_counts[k] / total for k in sorted(sample_counts)})


def adaptive_weights(
    sample_counts: Mapping[int, int],
    alphas: Union[AlphaCoefficients, Mapping[int, float]],
) -> AggregationWeights:
    """
    w_k = alpha_k N_k / sum_j alpha_j N_j.

    Alphas are divided by their maximum first. This leaves the weights
    unchanged and makes uniform alphas exactly 1.0, so the result then equals
    fedavg_weights bit for bit.
    """
    _check_counts(sample_counts)
    if not isinstance(alphas, AlphaCoefficients):
        alphas = AlphaCoefficients(dict(alphas))
    if set(alphas.alphas) != set(sample_counts):
        raise ContractError(
            f"alphas for plants {sorted(alphas.alphas)}, counts for {sorted(sample_counts)}"
        )
    top = max(alphas.alphas.values())
    order = sorted(sample_counts)
    scaled = {k: (alphas[k] / top) * sample_counts[k] for k in order}
    total = sum(scaled[k] for k in order)
    return AggregationWeights({k: scaled[k] / total for k in order})


def compute_alpha(
    local_validation_mse: Mapping[int, float], alpha_mean: float = 1.0
) -> AlphaCoefficients:
    """alpha_k = ln(1 + 1/mse_k), rescaled so the alphas average alpha_mean."""
    if not local_validation_mse:
        raise ConfigError("cannot compute alphas for an empty plant list")
    bad = {k: m for k, m in local_validation_mse.items() if not (m > 0 and math.isfinite(m))}
    if bad:
        raise ContractError(f"validation MSE must be positive and finite: {bad}")
    raw = {k: math.log1p(1.0 / m) for k, m in sorted(local_validation_mse.items())}
    mean_raw = math.fsum(raw.values()) / len(raw)
    return AlphaCoefficients({k: alpha_mean * r / mean_raw for k, r in raw.items()})


# ---------------------------------------------------------------------------
# Federated rounds
# ---------------------------------------------------------------------------


class FederatedCoordinator:
    def __init__(self, config: FederatedConfig, log_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.arch = config.arch
        self.names: Dict[int, str] = {p.plant_id: p.name for p in config.plants}
        self.global_params = init_params(self.arch, config.master_seed)
        self.records: List[RoundRecord] = []
        self.sessions = {}
        self.sample_counts: Dict[int, int] = {}
        self.latest_reports: Dict[int, EvalReport] = {}
        self.initial_reports: Dict[int, EvalReport] = {}
        self.updates_received = 0
        # Logging setup
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.jsonl_file: Optional[Path] = None
        self.jsonl_handle = None

    def on_join(self, request: JoinRequest) -> Union[JoinAccept, ProtocolError]:
        if request.plant_id not in self.names:
            return ProtocolError(
                ErrorCode.UNKNOWN_PLANT,
                f"plant {request.plant_id} is not part of this federation",
            )
        if request.arch_hash != self.arch.arch_hash():
            return ProtocolError(
                ErrorCode.ARCH_MISMATCH,
                f"plant {request.plant_id} does not run {self.arch.arch_id}",
            )
        return JoinAccept(
            round_count=self.config.rounds,
            q=self.arch.parameter_count,
            quant_spec=self.config.quant,
            peer_ids=tuple(sorted(self.names)),
            weights_mode=self.config.weighting_mode,
            secure=self.config.secure,
        )

    def _start_logging(self):
        """Open rounds.jsonl for this run"""
        if self.log_dir is None:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.jsonl_file = self.log_dir / "rounds.jsonl"
        self.jsonl_handle = open(self.jsonl_file, "w", encoding="utf-8")

    def _log_round(self, record: RoundRecord):
        if self.jsonl_handle:
            self.jsonl_handle.write(json.dumps(record.to_log(self.names), sort_keys=True) + "\n")
            self.jsonl_handle.flush()

    def _stop_logging(self):
        if self.jsonl_handle:
            self.jsonl_handle.close()
            self.jsonl_handle = None

    async def _exchange(self, build: Callable[[int], object], expect: tuple) -> Dict[int, object]:
        """Send one request per plant concurrently and wait for every reply."""
        plant_ids = sorted(self.sessions)
        tasks = [
            asyncio.ensure_future(self.sessions[p].request(build(p), expect)) for p in plant_ids
        ]
        try:
            replies = await asyncio.gather(*tasks)
        except BaseException:
            for task in tasks:
                task.cancel()
            raise
        return dict(zip(plant_ids, replies))

    async def evaluate_global(self, t: int) -> Dict[int, EvalReport]:
        blob = serialize_params(self.global_params)
        reports = await self._exchange(lambda _: EvalRequest(t, blob), (EvalReport,))
        for plant_id, report in reports.items():
            known = self.sample_counts.setdefault(plant_id, report.n_train)
            if known != report.n_train:
                raise ProtocolFailure(
                    f"plant {plant_id} changed its training size from {known} to {report.n_train}",
                    ErrorCode.UNEXPECTED_MESSAGE,
                )
        self.latest_reports = reports
        return reports

    @staticmethod
    def global_train_mse(reports: Mapping[int, EvalReport]) -> float:
        """N_k-weighted mean of the plants' de-normalized training MSE."""
        total = sum(r.n_train for r in reports.values())
        return math.fsum(reports[k].n_train * reports[k].train_mse for k in sorted(reports)) / total

    def round_weights(self) -> Tuple[AggregationWeights, Optional[AlphaCoefficients]]:
        if self.config.weighting_mode == "fedavg":
            return fedavg_weights(self.sample_counts), None
        if self.config.alpha_overrides is not None:
            alphas = AlphaCoefficients(
                {k: self.config.alpha_overrides[name] for k, name in self.names.items()}
            )
        else:
            alphas = compute_alpha(
                {k: r.train_mse_normalized for k, r in self.latest_reports.items()},
                self.config.alpha_mean,
            )
        return adaptive_weights(self.sample_counts, alphas), alphas

    def _aggregate(
        self,
        t: int,
        updates: Mapping[int, Union[LocalUpdatePlain, LocalUpdateMasked]],
        weights: AggregationWeights,
    ) -> ParameterVector:
        for plant_id, update in updates.items():
            if update.n_samples != self.sample_counts[plant_id]:
                raise ProtocolFailure(
                    f"plant {plant_id} trained on {update.n_samples} samples, "
                    f"reported {self.sample_counts[plant_id]}",
                    ErrorCode.UNEXPECTED_MESSAGE,
                )

        if self.config.secure:
            stale = [k for k, u in updates.items() if u.masked.round_index != t]
            if stale:
                raise ProtocolFailure(
                    f"masked updates from plants {stale} are not for round {t}",
                    ErrorCode.ROUND_REGRESSION,
                )
            return aggregate_masked(
                [updates[k].masked for k in sorted(updates)],
                self.config.quant,
                sorted(self.names),
                self.arch.arch_id,
            )

        total = None
        # fixed ascending plant order makes the sum independent of arrival order
        for plant_id in sorted(updates):
            try:
                theta = deserialize_params(updates[plant_id].params, self.arch)
            except ContractError as e:
                raise ProtocolFailure(f"plant {plant_id}: {e}", ErrorCode.LENGTH_MISMATCH) from e
            contribution = weights[plant_id] * theta.values
            total = contribution if total is None else total + contribution
        return ParameterVector(total, self.arch.arch_id)

    async def run_round(self, t: int) -> Tuple[ParameterVector, RoundRecord]:
        start = time.perf_counter()
        weights, alphas = self.round_weights()
        blob = serialize_params(self.global_params)
        expect = (LocalUpdateMasked,) if self.config.secure else (LocalUpdatePlain,)

        updates = await self._exchange(
            lambda _: GlobalModel(t, blob, dict(weights.weights)), expect
        )
        self.updates_received += len(updates)
        for plant_id, update in updates.items():
            logger.debug(
                "round %d plant %s local loss %.6f", t, self.names[plant_id], update.train_loss
            )

        self.global_params = self._aggregate(t, updates, weights)
        reports = await self.evaluate_global(t)
        await asyncio.gather(*(s.notify(RoundAck(t)) for s in self.sessions.values()))

        record = RoundRecord(
            t=t,
            global_train_mse=self.global_train_mse(reports),
            per_plant_test_mse={k: r.test_mse for k, r in sorted(reports.items())},
            weights_used=weights,
            wall_time_ms=(time.perf_counter() - start) * 1000.0,
            per_plant_train_mse={k: r.train_mse for k, r in sorted(reports.items())},
            alphas=None if alphas is None else dict(alphas.alphas),
        )
        self.records.append(record)
        self._log_round(record)
        logger.info(
            "round %d/%d: global train MSE %.4f", t, self.config.rounds, record.global_train_mse
        )
        return self.global_params, record

    async def _abort(self, exc: FedPlantError) -> None:
        code = getattr(exc, "code", None) or ErrorCode.ABORTED
        for session in self.sessions.values():
            try:
                await session.notify(ProtocolError(int(code), str(exc)))
            except ProtocolFailure:
                pass

    async def run(self, server: FederationServer) -> FederatedResult:
        """Wait for every plant, then run round 0 evaluation and config.rounds rounds."""
        self.sessions = await server.wait_for_plants(len(self.names), self.config.join_timeout)
        self._start_logging()
        try:
            self.initial_reports = await self.evaluate_global(0)
            initial = self.global_train_mse(self.initial_reports)
            logger.info("initial global train MSE %.4f", initial)
            for t in range(1, self.config.rounds + 1):
                await self.run_round(t)
            await asyncio.gather(*(s.notify(Shutdown()) for s in self.sessions.values()))
        except FedPlantError as exc:
            logger.error("federation aborted: %s", exc)
            await self._abort(exc)
            raise
        finally:
            self._stop_logging()
            for session in self.sessions.values():
                await session.close()
        return FederatedResult(
            final_params=self.global_params,
            records=list(self.records),
            initial_train_mse=initial,
            initial_reports=self.initial_reports,
            final_reports=self.latest_reports,
            updates_received=self.updates_received,
        )


def _check_tables(config: FederatedConfig, tables: Mapping[str, RawPlantTable]) -> None:
    missing = [p.name for p in config.plants if p.name not in tables]
    if missing:
        raise DataError(f"no data for plants {missing}")


async def _run_federated(
    config: FederatedConfig,
    tables: Mapping[str, RawPlantTable],
    endpoint: str,
    log_dir: Optional[Union[str, Path]],
) -> FederatedResult:
    _check_tables(config, tables)
    clients = [PlantClient(spec, tables[spec.name], config) for spec in config.plants]
    coordinator = FederatedCoordinator(config, log_dir)
    server = await serve(endpoint, coordinator, config.phase_timeout)
    tasks = [
        asyncio.create_task(connect(server.endpoint, client, config.phase_timeout))
        for client in clients
    ]
    try:
        result = await coordinator.run(server)
    except FedPlantError as exc:
        done, pending = await asyncio.wait(tasks, timeout=config.phase_timeout)
        for task in pending:
            task.cancel()
        # a plant's own failure (divergence, bad data) explains the abort better
        for task in done:
            cause = task.exception()
            if isinstance(cause, FedPlantError) and not isinstance(cause, ProtocolFailure):
                raise cause from exc
        raise
    finally:
        await server.close()
    await asyncio.gather(*tasks)
    result.predictions = pd.concat([c.predictions() for c in clients], ignore_index=True)
    return result


def run_federated(
    config: FederatedConfig,
    tables: Mapping[str, RawPlantTable],
    endpoint: Optional[str] = None,
    log_dir: Optional[Union[str, Path]] = None,
) -> FederatedResult:
    """
    Run the whole federation in this process: one coordinator and one plant
    client task per table, connected over `endpoint` (a fresh in-process
    channel by default, or host:port for loopback TCP).
    """
    endpoint = endpoint or f"inproc:federation-{next(_federation_ids)}"
    return asyncio.run(_run_federated(config, tables, endpoint, log_dir))


def serve_federated(
    config: FederatedConfig,
    endpoint: str,
    log_dir: Optional[Union[str, Path]] = None,
    on_listening: Optional[Callable[[str], None]] = None,
) -> FederatedResult:
    """Coordinator only; plants join from other processes."""

    async def _serve() -> FederatedResult:
        coordinator = FederatedCoordinator(config, log_dir)
        server = await serve(endpoint, coordinator, config.phase_timeout)
        if on_listening is not None:
            on_listening(server.endpoint)
        try:
            return await coordinator.run(server)
        finally:
            await server.close()

    return asyncio.run(_serve())


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _prepare_all(
    config: FederatedConfig, tables: Mapping[str, RawPlantTable]
) -> Dict[str, PreparedPlant]:
    _check_tables(config, tables)
    return {
        p.name: prepare_plant(
            tables[p.name], config.window, config.split_fraction, config.outlier_k
        )
        for p in config.plants
    }


def run_centralized(
    config: FederatedConfig, tables: Mapping[str, RawPlantTable]
) -> CentralizedResult:
    """
    Pool every plant's normalized training split and train one model for
    rounds x epochs epochs; score it on each plant's own test split.
    """
    prepared = _prepare_all(config, tables)
    arch = config.arch
    pooled = PlantDataset(
        "centralized",
        np.concatenate([p.split.train.inputs for p in prepared.values()]),
        np.concatenate([p.split.train.targets for p in prepared.values()]),
    )
    theta, losses = train_epochs(
        init_params(arch, config.master_seed),
        arch,
        pooled,
        config.local,
        epochs=config.rounds * config.local.epochs,
        label="centralized",
    )
    metrics = {
        name: evaluate(theta, arch, p.split.test, p.stats) for name, p in prepared.items()
    }
    counts = {
        name: (p.split.train.n_samples, p.split.test.n_samples) for name, p in prepared.items()
    }
    predictions = pd.concat(
        [prediction_frame(theta, arch, p) for p in prepared.values()], ignore_index=True
    )
    logger.info("centralized: final epoch loss %.6f", losses[-1])
    return CentralizedResult(theta, losses, metrics, counts, predictions)


def run_local_only(
    config: FederatedConfig, tables: Mapping[str, RawPlantTable]
) -> Dict[str, LocalOnlyResult]:
    """Each plant trains alone from the shared initial model."""
    arch = config.arch
    results = {}
    for name, p in _prepare_all(config, tables).items():
        theta, losses = train_epochs(
            init_params(arch, config.master_seed),
            arch,
            p.split.train,
            config.local,
            epochs=config.rounds * config.local.epochs,
            label=name,
        )
        metrics = evaluate(theta, arch, p.split.test, p.stats)
        logger.info("local-only %s: test MSE %.4f", name, metrics.mse)
        results[name] = LocalOnlyResult(
            theta,
            metrics,
            losses,
            p.split.train.n_samples,
            p.split.test.n_samples,
            prediction_frame(theta, arch, p),
        )
    return results
