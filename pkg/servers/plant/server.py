"""
Plant-side process: holds one plant's data, trains locally, and talks to the
coordinator through the session protocol. Only parameters (masked in secure
mode), N_k and scalar scores leave this process.

Run standalone:

    python servers/plant/server.py --plant A --data data/plant_A.csv \
        --connect 127.0.0.1:7600 --config fedplant.ini
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Union

import pandas as pd

if __package__ in (None, ""):
    sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from config import FederatedConfig, PlantSpec, load_config  # noqa: E402
from data_pipeline import PreparedPlant, RawPlantTable, parse_csv, prepare_plant  # noqa: E402
from errors import (  # noqa: E402
    ConfigError,
    ContractError,
    DataError,
    FedPlantError,
    ProtocolFailure,
)
from local_trainer import (  # noqa: E402
    evaluate,
    prediction_frame,
    predictions_to_csv,
    train_local,
)
from model_core import ParameterVector, deserialize_params, serialize_params  # noqa: E402
from secure_aggregation import MaskSeedMatrix, mask_update  # noqa: E402
from transport import (  # noqa: E402
    ErrorCode,
    EvalReport,
    EvalRequest,
    GlobalModel,
    JoinAccept,
    JoinRequest,
    LocalUpdateMasked,
    LocalUpdatePlain,
    connect,
)

logger = logging.getLogger(__name__)


class PlantClient:
    """Callbacks driven by transport.connect for one plant."""

    def __init__(self, spec: PlantSpec, table: RawPlantTable, config: FederatedConfig):
        self.spec = spec
        self.plant_id = spec.plant_id
        self.config = config
        self.arch = config.arch
        self.prepared: PreparedPlant = prepare_plant(
            table, config.window, config.split_fraction, config.outlier_k
        )
        self.accept: Optional[JoinAccept] = None
        self.seeds: Optional[MaskSeedMatrix] = None
        # the model scored last; after Shutdown this is the final global model
        self.last_evaluated: Optional[ParameterVector] = None
        logger.info(
            "plant %s ready: %d train / %d test windows",
            spec.name,
            self.prepared.split.train.n_samples,
            self.prepared.split.test.n_samples,
        )

    def join_request(self) -> JoinRequest:
        return JoinRequest(self.plant_id, self.arch.arch_hash())

    async def on_accept(self, accept: JoinAccept) -> None:
        if accept.q != self.arch.parameter_count:
            raise ProtocolFailure(
                f"server expects {accept.q} parameters, local model has "
                f"{self.arch.parameter_count}",
                ErrorCode.ARCH_MISMATCH,
            )
        self.accept = accept
        if accept.secure:
            self.seeds = MaskSeedMatrix.derive(
                self.config.mask_secret.encode("utf-8"), accept.peer_ids
            )

    def _params(self, blob: bytes):
        try:
            return deserialize_params(blob, self.arch)
        except ContractError as e:
            raise ProtocolFailure(str(e), ErrorCode.LENGTH_MISMATCH) from e

    async def on_global_model(
        self, msg: GlobalModel
    ) -> Union[LocalUpdatePlain, LocalUpdateMasked]:
        accept = self.accept
        train_set = self.prepared.split.train
        update = await asyncio.to_thread(
            train_local,
            self._params(msg.params),
            self.arch,
            train_set,
            self.config.local,
            self.plant_id,
            (msg.t - 1) * self.config.local.epochs,
        )
        if not accept.secure:
            return LocalUpdatePlain(
                t=msg.t,
                plant_id=self.plant_id,
                n_samples=update.n_samples,
                train_loss=update.train_loss_final,
                params=serialize_params(update.params),
            )

        if self.plant_id not in msg.weights:
            raise ProtocolFailure(
                f"round {msg.t} carries no weight for plant {self.plant_id}",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        masked = mask_update(
            update.params,
            msg.weights[self.plant_id],
            self.plant_id,
            accept.peer_ids,
            self.seeds,
            msg.t,
            accept.quant_spec,
        )
        return LocalUpdateMasked(
            t=msg.t,
            masked=masked,
            n_samples=update.n_samples,
            train_loss=update.train_loss_final,
        )

    async def on_evaluate(self, msg: EvalRequest) -> EvalReport:
        params = self._params(msg.params)
        self.last_evaluated = params
        split, stats = self.prepared.split, self.prepared.stats
        train = evaluate(params, self.arch, split.train, stats)
        train_normalized = evaluate(params, self.arch, split.train, None)
        test = evaluate(params, self.arch, split.test, stats)
        return EvalReport(
            t=msg.t,
            plant_id=self.plant_id,
            n_train=split.train.n_samples,
            n_test=split.test.n_samples,
            train_mse=train.mse,
            train_mse_normalized=train_normalized.mse,
            test_mse=test.mse,
            test_mae=test.mae,
            test_r2=test.r2,
        )

    def predictions(self) -> pd.DataFrame:
        """Test-split predictions of the last evaluated model, in original units."""
        if self.last_evaluated is None:
            raise ProtocolFailure(
                f"plant {self.spec.name} has not evaluated a model yet",
                ErrorCode.UNEXPECTED_MESSAGE,
            )
        return prediction_frame(self.last_evaluated, self.arch, self.prepared)


def load_plant_table(path: Union[str, Path], name: str) -> RawPlantTable:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read data for plant {name}: {e}") from e
    return parse_csv(data, name)


def run_plant(
    config: FederatedConfig,
    plant: Union[int, str],
    data_file: Union[str, Path],
    endpoint: str,
    out_dir: Optional[Union[str, Path]] = None,
) -> int:
    """
    Join the federation at `endpoint` and serve rounds until Shutdown.

    With `out_dir`, the plant writes predictions_<name>.csv there for the final
    global model; the file stays on the plant's side.
    """
    spec = config.plant(plant)
    client = PlantClient(spec, load_plant_table(data_file, spec.name), config)
    rounds = asyncio.run(connect(endpoint, client, config.phase_timeout))
    logger.info("plant %s finished after %d rounds", spec.name, rounds)
    if out_dir is not None:
        out = Path(out_dir)
        path = out / f"predictions_{spec.name}.csv"
        try:
            out.mkdir(parents=True, exist_ok=True)
            path.write_bytes(predictions_to_csv(client.predictions()))
        except OSError as e:
            raise ConfigError(f"cannot write {path}: {e}") from e
        logger.info("plant %s wrote %s", spec.name, path)
    return rounds


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Federated plant client.")
    parser.add_argument("--plant", required=True, help="Plant name or numeric id.")
    parser.add_argument("--data", required=True, help="The plant's CSV file.")
    parser.add_argument("--connect", required=True, help="Coordinator host:port.")
    parser.add_argument("--config", default=None, help="INI experiment config.")
    parser.add_argument("--out", default=None, help="Directory for this plant's predictions.")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        run_plant(
            load_config(args.config).federated, args.plant, args.data, args.connect, args.out
        )
    except FedPlantError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
