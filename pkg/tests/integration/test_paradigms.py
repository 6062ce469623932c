"""
End-to-end comparison of the three paradigms on the default synthetic plants.
These runs use the full default configuration across five seeds and take a
few minutes.
"""

import json
import logging
import math

import pytest

from config import SEED_ENV_VAR
from experiments import MODES, cmd_compare, cmd_generate, cmd_run

logger = logging.getLogger(__name__)

pytestmark = pytest.mark.slow

SEEDS = (42, 7, 1234, 2024, 99)
PLANTS = ("A", "B", "C")


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    out = {}
    try:
        for seed in SEEDS:
            mp.setenv(SEED_ENV_VAR, str(seed))
            root = tmp_path_factory.mktemp(f"paradigms_{seed}")
            cmd_generate(None, root / "data", seed)
            run_dirs = []
            for mode in MODES:
                cmd_run(mode, None, root / "data", root / mode)
                run_dirs.append(root / mode)
            out[seed] = cmd_compare(run_dirs, root / "report.json", root / "table.csv")
    finally:
        mp.undo()
    return out


def _mse(report, mode, plant):
    return report["paradigms"][mode][plant]["mse"]


def test_federated_training_converges(reports):
    convergence = reports[42]["convergence"]
    assert convergence["rounds"] == 40
    assert convergence["reduction_round_1_to_round_5_pct"] >= 90.0
    assert convergence["final_mse"] <= convergence["round_5_mse"]


def test_federated_beats_local_only_for_every_plant(reports):
    wins = [
        seed
        for seed, report in reports.items()
        if all(_mse(report, "federated", p) < _mse(report, "local", p) for p in PLANTS)
    ]
    logger.info("federated beat local-only everywhere for seeds %s", wins)
    assert len(wins) >= 4


def test_data_poor_plant_gains_most(reports):
    gains = {seed: report["improvement_pct"]["B"] for seed, report in reports.items()}
    logger.info("plant B improvement: %s", json.dumps(gains))
    assert sum(g is not None and g >= 40.0 for g in gains.values()) >= 4


def test_federated_close_to_centralized(reports):
    close = [
        seed
        for seed, report in reports.items()
        if all(
            _mse(report, "federated", p) <= 1.5 * _mse(report, "centralized", p) for p in PLANTS
        )
    ]
    assert len(close) >= 4


def test_every_paradigm_scores_every_plant(reports):
    report = reports[42]
    for mode in MODES:
        plants = report["paradigms"][mode]
        assert sorted(plants) == list(PLANTS)
        assert all(math.isfinite(p["mse"]) and p["mse"] > 0 for p in plants.values())
    assert sorted(report["improvement_pct"]) == list(PLANTS)
