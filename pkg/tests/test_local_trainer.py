"""
Unit tests for local training and evaluation metrics.
"""

import dataclasses

import numpy as np
import pytest
from sklearn.metrics import mean_absolute_error, mean_squared_error, r2_score

from data_pipeline import (
    NormalizationStats,
    PlantDataset,
    PlantRegime,
    SyntheticConfig,
    WindowSpec,
    generate_synthetic_plants,
    prepare_plant,
)
from errors import DataError, DivergenceError
from local_trainer import (
    LocalTrainConfig,
    LocalUpdate,
    evaluate,
    regression_metrics,
    train_epochs,
    train_local,
)
from model_core import (
    ModelArchitecture,
    init_params,
    loss_gradient,
    serialize_params,
    sgd_step,
)
from transport import LocalUpdatePlain, encode


def _linear_dataset(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    return PlantDataset("P", x, y)


ARCH = ModelArchitecture(input_dim=3, hidden_layers=(6,), activation="tanh")


class TestRegressionMetrics:
    def test_matches_sklearn(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=50)
        pred = truth + rng.normal(scale=0.3, size=50)
        m = regression_metrics(pred, truth)
        assert m.mse == pytest.approx(mean_squared_error(truth, pred))
        assert m.mae == pytest.approx(mean_absolute_error(truth, pred))
        assert m.r2 == pytest.approx(r2_score(truth, pred))

    def test_perfect_prediction_of_constant_target(self):
        m = regression_metrics([2.0, 2.0], [2.0, 2.0])
        assert (m.mse, m.mae, m.r2) == (0.0, 0.0, 1.0)

    def test_constant_target_with_error_is_undefined(self):
        with pytest.raises(DataError):
            regression_metrics([1.0, 3.0], [2.0, 2.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            regression_metrics([1.0, 2.0, 3.0], [1.0, 2.0])


class TestTrainLocal:
    def test_zero_learning_rate_returns_received_model(self):
        params = init_params(ARCH, 4)
        cfg = LocalTrainConfig(epochs=3, batch_size=8, eta=0.0)
        update = train_local(params, ARCH, _linear_dataset(), cfg, plant_id=2)
        assert np.array_equal(update.params.values, params.values)
        assert update.plant_id == 2
        assert update.n_samples == 64

    def test_deterministic(self):
        cfg = LocalTrainConfig(epochs=2, batch_size=10, eta=0.05, shuffle_seed=8)
        a = train_local(init_params(ARCH, 1), ARCH, _linear_dataset(), cfg)
        b = train_local(init_params(ARCH, 1), ARCH, _linear_dataset(), cfg)
        assert np.array_equal(a.params.values, b.params.values)
        assert a.train_loss_final == b.train_loss_final

    def test_single_full_batch_is_plain_gradient_descent(self):
        data = _linear_dataset(n=20)
        params = init_params(ARCH, 2)
        cfg = LocalTrainConfig(epochs=1, batch_size=20, eta=0.1)
        update = train_local(params, ARCH, data, cfg)
        _, grad = loss_gradient(params, ARCH, data.inputs, data.targets)
        assert np.array_equal(update.params.values, sgd_step(params, grad, 0.1).values)

    def test_epochs_continue_across_calls(self):
        data = _linear_dataset()
        cfg = LocalTrainConfig(epochs=2, batch_size=16, eta=0.05, shuffle_seed=1)
        start = init_params(ARCH, 3)
        straight, losses = train_epochs(start, ARCH, data, cfg, epochs=4)
        first = train_local(start, ARCH, data, cfg, epoch_offset=0)
        second = train_local(first.params, ARCH, data, cfg, epoch_offset=2)
        assert np.array_equal(straight.values, second.params.values)
        assert len(losses) == 4
        assert second.train_loss_final == losses[-1]

    def test_loss_decreases_on_linear_problem(self):
        cfg = LocalTrainConfig(epochs=100, batch_size=16, eta=0.05)
        _, losses = train_epochs(init_params(ARCH, 0), ARCH, _linear_dataset(), cfg)
        assert losses[-1] < 0.5 * losses[0]

    def test_linear_model_recovers_slope(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(64, 1))
        data = PlantDataset("L", x, 3.0 * x)
        linear = ModelArchitecture(input_dim=1, hidden_layers=())
        cfg = LocalTrainConfig(epochs=200, batch_size=32, eta=0.05)
        update = train_local(init_params(linear, 0), linear, data, cfg)
        weight, bias = update.params.values
        assert abs(weight - 3.0) < 1e-2
        assert abs(bias) < 1e-2

    def test_update_reveals_no_training_rows(self):
        rng = np.random.default_rng(12)
        data = PlantDataset("S", rng.normal(size=(40, 3)), rng.normal(size=(40, 1)))
        cfg = LocalTrainConfig(epochs=3, batch_size=8, eta=0.01)
        update = train_local(init_params(ARCH, 5), ARCH, data, cfg, plant_id=1)
        assert {f.name for f in dataclasses.fields(LocalUpdate)} == {
            "plant_id",
            "params",
            "n_samples",
            "train_loss_final",
        }
        blob = serialize_params(update.params)
        frame = encode(
            LocalUpdatePlain(1, update.plant_id, update.n_samples, update.train_loss_final, blob)
        )
        for value in np.concatenate([data.inputs.ravel(), data.targets.ravel()]):
            assert value.tobytes() not in frame
            assert np.float32(value).tobytes() not in frame

    def test_loss_falls_over_seeded_runs_with_default_rate(self):
        arch = ModelArchitecture(input_dim=16)
        spec = WindowSpec()
        falling = 0
        for run in range(20):
            (table,) = generate_synthetic_plants(
                SyntheticConfig(plants=(PlantRegime(name="R", n_samples=300),)), seed=run
            )
            train = prepare_plant(table, spec).split.train
            cfg = LocalTrainConfig(epochs=10, shuffle_seed=run)
            _, losses = train_epochs(init_params(arch, run), arch, train, cfg)
            falling += losses[-1] < losses[0]
        assert falling >= 19

    def test_divergence_names_plant_and_epoch(self):
        data = PlantDataset("Z", np.full((4, 3), 1e3), np.full((4, 1), 1e3))
        cfg = LocalTrainConfig(epochs=5, batch_size=4, eta=1e300)
        with pytest.raises(DivergenceError, match="plant Z"):
            train_local(init_params(ARCH, 0), ARCH, data, cfg)


class TestEvaluate:
    def test_metrics_are_in_original_units(self):
        data = _linear_dataset(n=30)
        stats = NormalizationStats(
            feature_columns=("a", "b", "c"),
            target_columns=("y",),
            feature_mean=np.zeros(3),
            feature_std=np.ones(3),
            target_mean=np.array([100.0]),
            target_std=np.array([10.0]),
        )
        params = init_params(ARCH, 6)
        normalized = evaluate(params, ARCH, data, None)
        original = evaluate(params, ARCH, data, stats)
        assert original.mse == pytest.approx(100.0 * normalized.mse)
        assert original.mae == pytest.approx(10.0 * normalized.mae)
        assert original.r2 == pytest.approx(normalized.r2)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
