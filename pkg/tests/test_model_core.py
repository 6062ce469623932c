"""
Unit tests for the regression surrogate: shapes, initialization, gradients,
SGD and parameter serialization.
"""

import struct

import numpy as np
import pytest

from errors import ContractError, DivergenceError
from model_core import (
    Gradient,
    ModelArchitecture,
    ParameterVector,
    deserialize_params,
    forward,
    init_params,
    loss_gradient,
    mse_loss,
    predict,
    serialize_params,
    sgd_step,
)


class TestArchitecture:
    def test_parameter_count_default_window(self):
        arch = ModelArchitecture(input_dim=16)
        assert arch.parameter_count == 16 * 64 + 64 + 64 * 64 + 64 + 64 + 1
        assert arch.arch_id == "mlp-16x64x64x1-relu"

    def test_arch_hash_is_32_bytes_and_differs(self):
        a = ModelArchitecture(input_dim=8, hidden_layers=(4,))
        b = ModelArchitecture(input_dim=8, hidden_layers=(5,))
        assert len(a.arch_hash()) == 32
        assert a.arch_hash() != b.arch_hash()

    def test_rejects_unknown_activation(self):
        with pytest.raises(ContractError):
            ModelArchitecture(input_dim=3, activation="sigmoid")


class TestInitAndForward:
    def test_init_is_deterministic(self):
        arch = ModelArchitecture(input_dim=6, hidden_layers=(5, 4))
        a = init_params(arch, 123)
        b = init_params(arch, 123)
        c = init_params(arch, 124)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_biases_start_at_zero_and_weights_within_glorot_limit(self):
        arch = ModelArchitecture(input_dim=3, hidden_layers=(2,))
        values = init_params(arch, 0).values
        w1, b1, w2, b2 = values[:6], values[6:8], values[8:10], values[10:]
        assert np.all(b1 == 0) and np.all(b2 == 0)
        assert np.all(np.abs(w1) <= np.sqrt(6.0 / 5))
        assert np.all(np.abs(w2) <= np.sqrt(6.0 / 3))

    def test_forward_matches_manual_relu_network(self):
        arch = ModelArchitecture(input_dim=2, hidden_layers=(2,))
        # W1 = I, b1 = (0, -1), W2 = (1, 2), b2 = 0.5
        params = ParameterVector([1, 0, 0, 1, 0, -1, 1, 2, 0.5], arch.arch_id)
        out = forward(params, arch, [3.0, 0.5])
        # hidden = relu(3, -0.5) = (3, 0) -> 3 + 0 + 0.5
        assert out.shape == (1,)
        assert out[0] == pytest.approx(3.5)

    def test_forward_rejects_wrong_length(self):
        arch = ModelArchitecture(input_dim=4, hidden_layers=(3,))
        with pytest.raises(ContractError):
            forward(init_params(arch, 1), arch, [1.0, 2.0])

    def test_predict_rejects_foreign_parameters(self):
        a = ModelArchitecture(input_dim=4, hidden_layers=(3,))
        b = ModelArchitecture(input_dim=4, hidden_layers=(3,), activation="tanh")
        with pytest.raises(ContractError):
            predict(init_params(a, 1), b, np.zeros((2, 4)))

    def test_non_finite_parameters_are_divergence(self):
        with pytest.raises(DivergenceError):
            ParameterVector([0.0, np.nan], "x")

    def test_parameter_vector_is_read_only(self):
        params = ParameterVector([1.0, 2.0], "x")
        with pytest.raises(ValueError):
            params.values[0] = 5.0


class TestLossAndGradient:
    def test_mse_loss_example(self):
        assert mse_loss([[1.0], [3.0]], [[0.0], [1.0]]) == pytest.approx(2.5)

    def test_mse_loss_rejects_empty_batch(self):
        with pytest.raises(ContractError):
            mse_loss(np.zeros((0, 1)), np.zeros((0, 1)))

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(2024)
        eps = 1e-6
        worst = 0.0
        for trial in range(100):
            arch = ModelArchitecture(
                input_dim=int(rng.integers(1, 5)),
                hidden_layers=tuple(int(h) for h in rng.integers(1, 5, size=rng.integers(1, 3))),
                output_dim=int(rng.integers(1, 3)),
                activation="tanh",
            )
            params = init_params(arch, trial)
            x = rng.normal(size=(int(rng.integers(1, 6)), arch.input_dim))
            y = rng.normal(size=(x.shape[0], arch.output_dim))
            _, grad = loss_gradient(params, arch, x, y)

            numeric = np.empty(arch.parameter_count)
            for i in range(arch.parameter_count):
                up = params.values.copy()
                down = params.values.copy()
                up[i] += eps
                down[i] -= eps
                loss_up = mse_loss(predict(ParameterVector(up, arch.arch_id), arch, x), y)
                loss_down = mse_loss(predict(ParameterVector(down, arch.arch_id), arch, x), y)
                numeric[i] = (loss_up - loss_down) / (2 * eps)

            scale = max(np.linalg.norm(grad.values) + np.linalg.norm(numeric), 1e-12)
            worst = max(worst, np.linalg.norm(grad.values - numeric) / scale)
        assert worst < 1e-5

    def test_relu_gradient_in_linear_region(self):
        # every hidden unit active: the net is affine and the gradient is exact
        arch = ModelArchitecture(input_dim=1, hidden_layers=(1,))
        params = ParameterVector([2.0, 1.0, 3.0, 0.0], arch.arch_id)
        x = np.array([[1.0], [2.0]])
        y = np.array([[0.0], [0.0]])
        loss, grad = loss_gradient(params, arch, x, y)
        # pred = 3 * (2x + 1) -> (9, 15)
        assert loss == pytest.approx((81 + 225) / 2)
        # dL/db2 = 2 * mean(pred - y)
        assert grad.values[3] == pytest.approx(24.0)
        # dL/dw2 = 2 * mean((pred - y) * h), h = (3, 5)
        assert grad.values[2] == pytest.approx((2 * 9 * 3 + 2 * 15 * 5) / 2)

    def test_relu_gradient_matches_central_differences(self):
        rng = np.random.default_rng(8)
        eps = 1e-6
        worst = 0.0
        for trial in range(100):
            arch = ModelArchitecture(
                input_dim=int(rng.integers(1, 9)),
                hidden_layers=tuple(int(h) for h in rng.integers(1, 9, size=rng.integers(1, 3))),
                output_dim=int(rng.integers(1, 9)),
            )
            params = init_params(arch, 1000 + trial)
            x = rng.normal(size=(int(rng.integers(1, 9)), arch.input_dim))
            y = rng.normal(size=(x.shape[0], arch.output_dim))
            _, grad = loss_gradient(params, arch, x, y)

            numeric = np.empty(arch.parameter_count)
            for i in range(arch.parameter_count):
                up = params.values.copy()
                down = params.values.copy()
                up[i] += eps
                down[i] -= eps
                loss_up = mse_loss(predict(ParameterVector(up, arch.arch_id), arch, x), y)
                loss_down = mse_loss(predict(ParameterVector(down, arch.arch_id), arch, x), y)
                numeric[i] = (loss_up - loss_down) / (2 * eps)

            scale = max(np.linalg.norm(grad.values) + np.linalg.norm(numeric), 1e-12)
            worst = max(worst, np.linalg.norm(grad.values - numeric) / scale)
        assert worst < 1e-5


class TestSgdStep:
    def test_zero_learning_rate_is_identity(self):
        arch = ModelArchitecture(input_dim=3, hidden_layers=(2,))
        params = init_params(arch, 9)
        grad = Gradient(np.ones(arch.parameter_count))
        assert np.array_equal(sgd_step(params, grad, 0.0).values, params.values)

    def test_step_moves_against_gradient(self):
        params = ParameterVector([1.0, 1.0], "x")
        out = sgd_step(params, Gradient([2.0, -4.0]), 0.5)
        assert list(out.values) == [0.0, 3.0]

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ContractError):
            sgd_step(ParameterVector([1.0], "x"), Gradient([1.0]), -0.1)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            sgd_step(ParameterVector([1.0, 2.0], "x"), Gradient([1.0]), 0.1)

    def test_overflow_is_divergence(self):
        with pytest.raises(DivergenceError):
            sgd_step(ParameterVector([1e308], "x"), Gradient([-1e308]), 10.0)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_small_step_never_increases_batch_loss(self, activation):
        rng = np.random.default_rng(31 if activation == "relu" else 32)
        for trial in range(50):
            arch = ModelArchitecture(
                input_dim=int(rng.integers(1, 9)),
                hidden_layers=tuple(int(h) for h in rng.integers(1, 9, size=rng.integers(1, 3))),
                output_dim=int(rng.integers(1, 3)),
                activation=activation,
            )
            params = init_params(arch, trial)
            x = rng.normal(size=(int(rng.integers(1, 17)), arch.input_dim))
            y = rng.normal(size=(x.shape[0], arch.output_dim))
            before, grad = loss_gradient(params, arch, x, y)
            after = mse_loss(predict(sgd_step(params, grad, 1e-4), arch, x), y)
            assert after <= before


class TestSerialization:
    def test_round_trip_is_bit_exact(self):
        arch = ModelArchitecture(input_dim=5, hidden_layers=(4, 3))
        params = init_params(arch, 77)
        blob = serialize_params(params)
        assert len(blob) == 4 + 8 * arch.parameter_count
        assert struct.unpack_from("<I", blob)[0] == arch.parameter_count
        assert np.array_equal(deserialize_params(blob, arch).values, params.values)

    def test_single_value_golden_bytes(self):
        one = serialize_params(ParameterVector([1.0], "x"))
        assert one == bytes.fromhex("01000000" "000000000000f03f")

    def test_random_vectors_survive_serialization(self):
        rng = np.random.default_rng(1000)
        for _ in range(1000):
            arch = ModelArchitecture(
                input_dim=int(rng.integers(1, 9)), hidden_layers=(int(rng.integers(1, 9)),)
            )
            values = rng.normal(scale=10.0 ** rng.integers(-6, 7), size=arch.parameter_count)
            restored = deserialize_params(
                serialize_params(ParameterVector(values, arch.arch_id)), arch
            )
            assert restored.values.tobytes() == values.tobytes()

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda blob: blob[:3],
            lambda blob: blob[:-1],
            lambda blob: blob + b"\x00" * 8,
            lambda blob: struct.pack("<I", 0),
        ],
        ids=["no-prefix", "short", "long", "zero-count"],
    )
    def test_malformed_blobs_rejected(self, mutate):
        arch = ModelArchitecture(input_dim=2, hidden_layers=(2,))
        blob = serialize_params(init_params(arch, 0))
        with pytest.raises(ContractError):
            deserialize_params(mutate(blob), arch)

    def test_blob_for_other_architecture_rejected(self):
        small = ModelArchitecture(input_dim=2, hidden_layers=(2,))
        large = ModelArchitecture(input_dim=2, hidden_layers=(3,))
        with pytest.raises(ContractError):
            deserialize_params(serialize_params(init_params(small, 0)), large)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
