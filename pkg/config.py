"""
Declarative experiment configuration.

One INI file covers the federation, the model, local training, windowing,
secure aggregation, the transport and the synthetic generator. Every section
and key is optional; anything not given keeps its default. FEDPLANT_SEED in
the environment (or a .env file) overrides master_seed.
"""

import configparser
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data_pipeline import PlantRegime, SyntheticConfig, WindowSpec, default_regimes
from errors import ConfigError
from local_trainer import LocalTrainConfig
from model_core import ModelArchitecture
from secure_aggregation import QuantizationSpec

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "FEDPLANT_SEED"
DEFAULT_PLANT_NAMES = ("A", "B", "C")

_SECTIONS = (
    "federated",
    "model",
    "local",
    "window",
    "secure_aggregation",
    "transport",
    "plants",
    "synthetic",
)
_LIST_KEYS = {
    "hidden_layers",
    "feature_columns",
    "target_columns",
    "names",
    "temperature_range",
    "pressure_range",
    "flow_range",
    "concentration_range",
}


class PlantSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    plant_id: int = Field(ge=1, lt=2**32)
    name: str = Field(min_length=1)
    data_file: Optional[str] = None

    @property
    def csv_name(self) -> str:
        return self.data_file or f"plant_{self.name}.csv"


def _default_plants() -> Tuple[PlantSpec, ...]:
    return tuple(
        PlantSpec(plant_id=i, name=name) for i, name in enumerate(DEFAULT_PLANT_NAMES, 1)
    )


class FederatedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rounds: int = Field(40, ge=1)
    plants: Tuple[PlantSpec, ...] = Field(default_factory=_default_plants, min_length=1)
    hidden_layers: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    window: WindowSpec = Field(default_factory=WindowSpec)
    local: LocalTrainConfig = Field(default_factory=LocalTrainConfig)
    weighting_mode: Literal["fedavg", "adaptive"] = "adaptive"
    # keyed by plant name; when set, alphas are used verbatim every round
    alpha_overrides: Optional[Dict[str, float]] = None
    alpha_mean: float = Field(1.0, gt=0.0)
    quant: QuantizationSpec = Field(default_factory=QuantizationSpec)
    secure: bool = True
    master_seed: int = Field(42, ge=0, lt=2**64)
    split_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    outlier_k: float = Field(5.0, gt=0.0)
    phase_timeout: float = Field(60.0, gt=0.0)
    join_timeout: float = Field(300.0, gt=0.0)
    mask_secret: str = Field("fedplant-shared-mask-secret", min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _shuffle_seed_follows_master(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        local = data.get("local")
        if local is None:
            local = {}
        if isinstance(local, dict) and "shuffle_seed" not in local:
            data = {**data, "local": {**local, "shuffle_seed": data.get("master_seed", 42)}}
        return data

    @model_validator(mode="after")
    def _consistent(self) -> "FederatedConfig":
        ids = [p.plant_id for p in self.plants]
        names = [p.name for p in self.plants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate plant ids: {ids}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate plant names: {names}")
        if self.alpha_overrides is not None:
            if set(self.alpha_overrides) != set(names):
                raise ValueError(
                    f"alpha_overrides must name every plant {names}, got {sorted(self.alpha_overrides)}"
                )
            bad = {k: v for k, v in self.alpha_overrides.items() if not v > 0}
            if bad:
                raise ValueError(f"alpha values must be > 0: {bad}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation '{self.activation}'")
        if not self.hidden_layers or any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden_layers needs at least one positive width")
        self.quant.check_capacity(len(self.plants))
        return self

    @property
    def arch(self) -> ModelArchitecture:
        return ModelArchitecture(
            input_dim=len(self.window.feature_columns) * self.window.window_length,
            hidden_layers=self.hidden_layers,
            output_dim=len(self.window.target_columns),
            activation=self.activation,
        )

    @property
    def plant_ids(self) -> List[int]:
        return [p.plant_id for p in self.plants]

    def plant(self, key: Union[int, str]) -> PlantSpec:
        """Look a plant up by name or by numeric id."""
        for p in self.plants:
            if p.name == str(key) or str(p.plant_id) == str(key):
                return p
        raise ConfigError(f"unknown plant '{key}'")

    def echo(self) -> Dict[str, Any]:
        """JSON-ready config without the mask secret."""
        return self.model_dump(mode="json", exclude={"mask_secret"})


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    federated: FederatedConfig = Field(default_factory=FederatedConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)


def _split(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _section(parser: configparser.ConfigParser, name: str) -> Dict[str, Any]:
    if not parser.has_section(name):
        return {}
    return {
        key: (_split(value) if key in _LIST_KEYS else value.strip())
        for key, value in parser.items(name)
    }


def _parse_alphas(text: str) -> Dict[str, float]:
    alphas = {}
    for item in _split(text):
        name, sep, value = item.partition(":")
        if not sep:
            raise ConfigError(f"alpha_overrides entries look like 'A:9.2', got '{item}'")
        try:
            alphas[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"alpha for plant {name.strip()} is not a number: '{value}'") from None
    return alphas


def _seed_from_env() -> Optional[int]:
    raw = os.getenv(SEED_ENV_VAR)
    if raw is None or not raw.strip():
        return None
    try:
        seed = int(raw.strip())
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{raw}'") from None
    if not 0 <= seed < 2**64:
        raise ConfigError(f"{SEED_ENV_VAR} must fit in 64 bits, got {seed}")
    return seed


def _federated_fields(parser: configparser.ConfigParser) -> Dict[str, Any]:
    fields: Dict[str, Any] = dict(_section(parser, "federated"))
    if "alpha_overrides" in fields:
        fields["alpha_overrides"] = _parse_alphas(fields["alpha_overrides"])

    model = _section(parser, "model")
    fields.update(model)

    for name, key in (("local", "local"), ("window", "window"), ("secure_aggregation", "quant")):
        values = _section(parser, name)
        if name == "secure_aggregation" and "mask_secret" in values:
            fields["mask_secret"] = values.pop("mask_secret")
        if values:
            fields[key] = values

    fields.update(_section(parser, "transport"))

    plants = _section(parser, "plants")
    names = plants.pop("names", None)
    if names is not None:
        fields["plants"] = [
            {"plant_id": i, "name": name, "data_file": plants.pop(f"{name}_file".lower(), None)}
            for i, name in enumerate(names, 1)
        ]
    if plants:
        raise ConfigError(f"unknown keys in [plants]: {sorted(plants)}")
    return fields


def _synthetic_fields(
    parser: configparser.ConfigParser, plant_names: Tuple[str, ...]
) -> Dict[str, Any]:
    fields: Dict[str, Any] = dict(_section(parser, "synthetic"))
    defaults = {r.name: r for r in default_regimes()}
    regimes = []
    for name in plant_names:
        base = defaults.get(name, PlantRegime(name=name)).model_dump()
        base.update(_section(parser, f"synthetic.{name}"))
        regimes.append(base)
    fields["plants"] = regimes
    return fields


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Read an INI experiment file (None means all defaults).

    Raises:
        ConfigError: unreadable file, unknown section or key, invalid value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e

    unknown = [
        s for s in parser.sections() if s not in _SECTIONS and not s.startswith("synthetic.")
    ]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")

    try:
        federated_fields = _federated_fields(parser)
        seed = _seed_from_env()
        if seed is not None:
            logger.info("%s overrides master_seed with %d", SEED_ENV_VAR, seed)
            federated_fields["master_seed"] = seed
        federated = FederatedConfig(**federated_fields)

        names = tuple(p.name for p in federated.plants)
        orphans = [
            s for s in parser.sections()
            if s.startswith("synthetic.") and s.split(".", 1)[1] not in names
        ]
        if orphans:
            raise ConfigError(f"synthetic sections for unknown plants: {orphans}")
        synthetic = SyntheticConfig(**_synthetic_fields(parser, names))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return ExperimentConfig(federated=federated, synthetic=synthetic)
