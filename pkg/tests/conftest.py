"""
Pytest configuration for fedplant tests.
"""

import os
import sys

import pytest

# Add project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import FederatedConfig, PlantSpec  # noqa: E402
from data_pipeline import PlantRegime, SyntheticConfig, WindowSpec, generate_synthetic_plants  # noqa: E402
from local_trainer import LocalTrainConfig  # noqa: E402

SMALL_INI = """
[federated]
rounds = 2
weighting_mode = adaptive
master_seed = 11

[model]
hidden_layers = 8

[local]
epochs = 1
batch_size = 16
eta = 0.05

[window]
window_length = 2

[synthetic.A]
n_samples = 100

[synthetic.B]
n_samples = 40

[synthetic.C]
n_samples = 100
"""


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: end-to-end paradigm runs on the default synthetic plants"
    )


def make_small_tables(seed: int = 7, names=("A", "B", "C")):
    regimes = {
        "A": PlantRegime(name="A", n_samples=80),
        "B": PlantRegime(name="B", n_samples=40, gain_sin=11.0, offset=65.0),
        "C": PlantRegime(name="C", n_samples=80, gain_coupling=5.0, offset=78.0),
    }
    synthetic = SyntheticConfig(plants=tuple(regimes[n] for n in names), missing_fraction=0.0)
    return {t.plant_id: t for t in generate_synthetic_plants(synthetic, seed)}


def make_small_config(names=("A", "B", "C"), **overrides) -> FederatedConfig:
    fields = dict(
        rounds=2,
        plants=tuple(PlantSpec(plant_id=i, name=n) for i, n in enumerate(names, 1)),
        hidden_layers=(8,),
        window=WindowSpec(window_length=2),
        local=LocalTrainConfig(epochs=1, batch_size=16, eta=0.05, shuffle_seed=3),
        weighting_mode="fedavg",
        secure=True,
        master_seed=5,
        phase_timeout=30.0,
        join_timeout=30.0,
    )
    fields.update(overrides)
    return FederatedConfig(**fields)


@pytest.fixture
def small_tables():
    return make_small_tables()


@pytest.fixture
def small_config():
    return make_small_config()


@pytest.fixture
def small_ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI, encoding="utf-8")
    return path
