"""
Experiment workflow: generate synthetic plants, run one paradigm, compare
three runs, and host or join a multi-process federation.

All artifacts are JSON, JSON lines or CSV written with sorted keys and fixed
float formatting, so identical invocations produce identical files.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from config import FederatedConfig, load_config
from coordinator import (
    FederatedResult,
    run_centralized,
    run_federated,
    run_local_only,
    serve_federated,
)
from data_pipeline import RawPlantTable, generate_synthetic_plants, parse_csv, table_to_csv
from errors import ConfigError, DataError
from local_trainer import predictions_to_csv
from servers.plant.server import run_plant

logger = logging.getLogger(__name__)

MODES = ("federated", "centralized", "local")
TABLE_HEADER = ["plant", "centralized_mse", "federated_mse", "local_only_mse"]
PathLike = Union[str, Path]


def _ensure_dir(path: PathLike) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}") from e


def _write_json(path: Path, obj: Any) -> None:
    _write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    _write_bytes(path, text.encode("utf-8"))


def _read_jsonl(path: Path) -> List[dict]:
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def improvement_pct(federated_mse: float, local_mse: float) -> Optional[float]:
    """100 * (1 - fed/local); None when the local-only MSE is zero."""
    if local_mse == 0:
        return None
    return 100.0 * (1.0 - federated_mse / local_mse)


def _reduction(before: Optional[float], after: Optional[float]) -> Optional[float]:
    if before is None or after is None or before == 0:
        return None
    return 100.0 * (1.0 - after / before)


def convergence_summary(initial_mse: float, global_mse: Sequence[float]) -> Dict[str, Any]:
    """Headline points of the global training-MSE curve."""
    round_1 = global_mse[0] if global_mse else None
    round_5 = global_mse[4] if len(global_mse) >= 5 else None
    final = global_mse[-1] if global_mse else None
    return {
        "initial_mse": initial_mse,
        "round_1_mse": round_1,
        "round_5_mse": round_5,
        "final_mse": final,
        "rounds": len(global_mse),
        "reduction_initial_to_round_5_pct": _reduction(initial_mse, round_5),
        "reduction_round_1_to_round_5_pct": _reduction(round_1, round_5),
        "reduction_initial_to_final_pct": _reduction(initial_mse, final),
    }


def load_plant_tables(
    config: FederatedConfig, data_dir: PathLike
) -> Tuple[Dict[str, RawPlantTable], Dict[str, str]]:
    """Read every configured plant's CSV; also return each file's sha256."""
    data_dir = Path(data_dir)
    tables, fingerprints = {}, {}
    for spec in config.plants:
        path = data_dir / spec.csv_name
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise DataError(f"missing data for plant {spec.name}: {path} ({e.strerror})") from e
        tables[spec.name] = parse_csv(raw, spec.name)
        fingerprints[spec.name] = hashlib.sha256(raw).hexdigest()
    return tables, fingerprints


def cmd_generate(
    config_path: Optional[PathLike], out_dir: PathLike, seed: Optional[int] = None
) -> List[Path]:
    cfg = load_config(config_path)
    seed = cfg.federated.master_seed if seed is None else seed
    out = _ensure_dir(out_dir)
    written = []
    for table in generate_synthetic_plants(cfg.synthetic, seed):
        path = out / f"plant_{table.plant_id}.csv"
        data = table_to_csv(table)
        _write_bytes(path, data)
        logger.info(
            "wrote %s (%d rows, sha256 %s)", path, len(table), hashlib.sha256(data).hexdigest()
        )
        written.append(path)
    return written


def _base_metrics(
    mode: str, cfg: FederatedConfig, fingerprints: Optional[Mapping[str, str]]
) -> Dict[str, Any]:
    return {
        "mode": mode,
        "master_seed": cfg.master_seed,
        "config": cfg.echo(),
        "data": dict(fingerprints) if fingerprints is not None else None,
    }


def write_federated_outputs(
    out: Path,
    cfg: FederatedConfig,
    result: FederatedResult,
    fingerprints: Optional[Mapping[str, str]],
) -> Path:
    """timings.jsonl and metrics.json; rounds.jsonl is written by the coordinator."""
    names = {p.plant_id: p.name for p in cfg.plants}
    _write_jsonl(
        out / "timings.jsonl",
        ({"t": r.t, "wall_time_ms": r.wall_time_ms} for r in result.records),
    )
    metrics = _base_metrics("federated", cfg, fingerprints)
    metrics["plants"] = {
        names[k]: {
            "mse": r.test_mse,
            "mae": r.test_mae,
            "r2": r.test_r2,
            "n_train": r.n_train,
            "n_test": r.n_test,
        }
        for k, r in sorted(result.final_reports.items())
    }
    metrics["initial_train_mse"] = result.initial_train_mse
    metrics["final_global_train_mse"] = result.records[-1].global_train_mse
    metrics["rounds"] = len(result.records)
    metrics["updates_received"] = result.updates_received
    if result.predictions is not None:
        _write_bytes(out / "predictions.csv", predictions_to_csv(result.predictions))
    path = out / "metrics.json"
    _write_json(path, metrics)
    return path


def cmd_run(
    mode: str,
    config_path: Optional[PathLike],
    data_dir: PathLike,
    out_dir: PathLike,
    endpoint: Optional[str] = None,
) -> Path:
    """
    Run one paradigm and write its artifacts.

    federated: rounds.jsonl, timings.jsonl, metrics.json
    centralized: epochs.jsonl, metrics.json
    local: metrics.json

    Every mode also writes predictions.csv (plant, t, y_true, y_pred) for the
    test splits in original units.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")
    cfg = load_config(config_path).federated
    tables, fingerprints = load_plant_tables(cfg, data_dir)
    out = _ensure_dir(out_dir)

    if mode == "federated":
        result = run_federated(cfg, tables, endpoint=endpoint, log_dir=out)
        return write_federated_outputs(out, cfg, result, fingerprints)

    metrics = _base_metrics(mode, cfg, fingerprints)
    if mode == "centralized":
        result = run_centralized(cfg, tables)
        _write_jsonl(
            out / "epochs.jsonl",
            ({"epoch": i, "loss": loss} for i, loss in enumerate(result.epoch_losses)),
        )
        metrics["plants"] = {}
        for name, m in result.metrics.items():
            n_train, n_test = result.sample_counts[name]
            metrics["plants"][name] = {**m.to_dict(), "n_train": n_train, "n_test": n_test}
        metrics["epochs"] = len(result.epoch_losses)
        metrics["final_epoch_loss"] = result.epoch_losses[-1]
        predictions = result.predictions
    else:
        results = run_local_only(cfg, tables)
        metrics["plants"] = {
            name: {**r.metrics.to_dict(), "n_train": r.n_train, "n_test": r.n_test}
            for name, r in results.items()
        }
        predictions = pd.concat([r.predictions for r in results.values()], ignore_index=True)
    _write_bytes(out / "predictions.csv", predictions_to_csv(predictions))
    path = out / "metrics.json"
    _write_json(path, metrics)
    return path


def _load_run(run_dir: PathLike) -> Dict[str, Any]:
    path = Path(run_dir) / "metrics.json"
    if not path.is_file():
        raise DataError(f"{run_dir} is not a completed run: metrics.json missing")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e


def _check_runs_match(runs: Mapping[str, Dict[str, Any]]) -> List[str]:
    """
    Reject runs that cannot be compared. Returns the modes that carry no data
    fingerprints (a coordinator served without them), whose data is unverified.
    """
    seeds = {mode: run["master_seed"] for mode, run in runs.items()}
    if len(set(seeds.values())) != 1:
        raise DataError(f"runs use different master seeds: {seeds}")
    prints = [run.get("data") for run in runs.values() if run.get("data") is not None]
    if any(p != prints[0] for p in prints[1:]):
        raise DataError("runs were made on different data files")
    unverified = sorted(mode for mode, run in runs.items() if run.get("data") is None)
    for mode in unverified:
        logger.warning("%s run has no data fingerprints; its data is not checked", mode)
    plant_sets = {mode: sorted(run["plants"]) for mode, run in runs.items()}
    if len({tuple(p) for p in plant_sets.values()}) != 1:
        raise DataError(f"runs cover different plants: {plant_sets}")
    for name in plant_sets["federated"]:
        counts = {
            (run["plants"][name]["n_train"], run["plants"][name]["n_test"]) for run in runs.values()
        }
        if len(counts) != 1:
            raise DataError(f"plant {name} has different sample counts across runs: {sorted(counts)}")
    return unverified


def cmd_compare(
    run_dirs: Sequence[PathLike], out: PathLike, table: PathLike
) -> Dict[str, Any]:
    """Merge one run of each paradigm into report.json and the comparison table."""
    runs: Dict[str, Dict[str, Any]] = {}
    dirs: Dict[str, Path] = {}
    for run_dir in run_dirs:
        run = _load_run(run_dir)
        mode = run.get("mode")
        if mode in runs:
            raise DataError(f"two {mode} runs given: {dirs[mode]} and {run_dir}")
        runs[mode] = run
        dirs[mode] = Path(run_dir)
    missing = [m for m in MODES if m not in runs]
    if missing:
        raise DataError(f"compare needs one run per paradigm; missing {missing}")
    unverified = _check_runs_match(runs)

    plant_order = [p["name"] for p in runs["federated"]["config"]["plants"]]
    rounds = _read_jsonl(dirs["federated"] / "rounds.jsonl")
    epochs = _read_jsonl(dirs["centralized"] / "epochs.jsonl")
    report = {
        "master_seed": runs["federated"]["master_seed"],
        "config": runs["federated"]["config"],
        "data": next((runs[m]["data"] for m in MODES if runs[m].get("data") is not None), None),
        "unverified_data": unverified,
        "paradigms": {mode: runs[mode]["plants"] for mode in MODES},
        "improvement_pct": {
            name: improvement_pct(
                runs["federated"]["plants"][name]["mse"], runs["local"]["plants"][name]["mse"]
            )
            for name in plant_order
        },
        "rounds": rounds,
        "centralized_epochs": [row["loss"] for row in epochs],
        "convergence": convergence_summary(
            runs["federated"]["initial_train_mse"], [row["global_train_mse"] for row in rounds]
        ),
    }

    out_path = Path(out)
    _ensure_dir(out_path.parent)
    _write_json(out_path, report)

    frame = pd.DataFrame(
        [
            [
                name,
                runs["centralized"]["plants"][name]["mse"],
                runs["federated"]["plants"][name]["mse"],
                runs["local"]["plants"][name]["mse"],
            ]
            for name in plant_order
        ],
        columns=TABLE_HEADER,
    )
    table_path = Path(table)
    _ensure_dir(table_path.parent)
    _write_bytes(
        table_path,
        frame.to_csv(index=False, float_format="%.6f", lineterminator="\n").encode("utf-8"),
    )
    return report


def parse_fingerprints(items: Sequence[str], cfg: FederatedConfig) -> Dict[str, str]:
    """
    NAME=SHA256 pairs as an operator copies them from each plant's CSV
    (`sha256sum plant_A.csv`). Either every configured plant is listed or none.
    """
    known = [p.name for p in cfg.plants]
    prints: Dict[str, str] = {}
    for item in items:
        name, sep, digest = item.partition("=")
        digest = digest.strip().lower()
        if not sep or name not in known:
            raise ConfigError(
                f"fingerprint '{item}' must be NAME=SHA256 for a plant in {known}"
            )
        if len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
            raise ConfigError(f"fingerprint for plant {name} is not a sha256 hex digest")
        if name in prints:
            raise ConfigError(f"plant {name} has two fingerprints")
        prints[name] = digest
    missing = [name for name in known if name not in prints]
    if prints and missing:
        raise ConfigError(f"no fingerprint for plants {missing}")
    return prints


def cmd_serve(
    config_path: Optional[PathLike],
    listen: str,
    out_dir: PathLike,
    on_listening: Optional[Callable[[str], None]] = None,
    fingerprints: Sequence[str] = (),
) -> Path:
    """
    Host the coordinator; plants join with cmd_client from other processes.

    The coordinator never reads plant data, so metrics.json records whatever
    fingerprints the operator passes; without them compare marks the run as
    unverified. Predictions are written by each plant (cmd_client --out).
    """
    cfg = load_config(config_path).federated
    prints = parse_fingerprints(fingerprints, cfg) or None
    out = _ensure_dir(out_dir)
    result = serve_federated(cfg, listen, log_dir=out, on_listening=on_listening)
    return write_federated_outputs(out, cfg, result, prints)


def cmd_client(
    config_path: Optional[PathLike],
    plant: str,
    data_file: PathLike,
    connect: str,
    out_dir: Optional[PathLike] = None,
) -> int:
    cfg = load_config(config_path)
    return run_plant(cfg.federated, plant, data_file, connect, out_dir)
