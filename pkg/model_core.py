"""
Feedforward regression surrogate with analytic gradients.

Parameters travel as one flat float64 vector. Layer l contributes its weight
matrix (fan_in x fan_out, row-major) followed by its bias (fan_out).
"""

import hashlib
import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from errors import ContractError, DivergenceError

ACTIVATIONS = ("relu", "tanh")
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class ModelArchitecture:
    input_dim: int
    hidden_layers: Tuple[int, ...] = (64, 64)
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ContractError("hidden layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(
                f"Unknown activation '{self.activation}'. Use relu or tanh."
            )

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_layers, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def parameter_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    @property
    def arch_id(self) -> str:
        widths = "x".join(
            str(d) for d in (self.input_dim, *self.hidden_layers, self.output_dim)
        )
        return f"mlp-{widths}-{self.activation}"

    def arch_hash(self) -> bytes:
        """32-byte digest plants present when joining a federation."""
        return hashlib.sha256(self.arch_id.encode("utf-8")).digest()


def _frozen_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError("parameter values must be a flat vector")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    arch_id: str

    def __post_init__(self):
        arr = _frozen_vector(self.values)
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite parameter values for {self.arch_id}")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Gradient:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen_vector(self.values)
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("non-finite gradient")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return len(self.values)


def _check_params(params: ParameterVector, arch: ModelArchitecture) -> None:
    if len(params) != arch.parameter_count:
        raise ContractError(
            f"parameter vector has {len(params)} values, "
            f"{arch.arch_id} needs {arch.parameter_count}"
        )
    if params.arch_id != arch.arch_id:
        raise ContractError(
            f"parameters belong to {params.arch_id}, not {arch.arch_id}"
        )


def _unflatten(
    values: np.ndarray, arch: ModelArchitecture
) -> List[Tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_dims:
        w = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def init_params(arch: ModelArchitecture, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases. Same (arch, seed) -> same bits."""
    rng = np.random.default_rng(seed & _SEED_MASK)
    chunks = []
    for fan_in, fan_out in arch.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParameterVector(np.concatenate(chunks), arch.arch_id)


def _as_batch(inputs, width: int, what: str) -> np.ndarray:
    batch = np.asarray(inputs, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ContractError(f"{what} must have shape (n, {width}), got {batch.shape}")
    return batch


def predict(
    params: ParameterVector, arch: ModelArchitecture, inputs: np.ndarray
) -> np.ndarray:
    """Batched forward pass: (n, input_dim) -> (n, output_dim)."""
    _check_params(params, arch)
    a = _as_batch(inputs, arch.input_dim, "inputs")
    layers = _unflatten(params.values, arch)
    for w, b in layers[:-1]:
        a = _activate(a @ w + b, arch.activation)
    w, b = layers[-1]
    return a @ w + b


def forward(
    params: ParameterVector, arch: ModelArchitecture, input: Sequence[float]
) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    if x.shape != (arch.input_dim,):
        raise ContractError(
            f"input must have length {arch.input_dim}, got shape {x.shape}"
        )
    return predict(params, arch, x[None, :])[0]


def mse_loss(pred, truth) -> float:
    """Mean over samples of the squared L2 residual norm."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.ndim != 2 or p.shape != y.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {y.shape}")
    if p.shape[0] == 0:
        raise ContractError("mse_loss needs a nonempty batch")
    return float(np.mean(np.sum((p - y) ** 2, axis=1)))


def loss_gradient(
    params: ParameterVector,
    arch: ModelArchitecture,
    batch_inputs,
    batch_targets,
) -> Tuple[float, Gradient]:
    """MSE loss and its exact gradient, averaged over the batch."""
    _check_params(params, arch)
    x = _as_batch(batch_inputs, arch.input_dim, "batch_inputs")
    y = _as_batch(batch_targets, arch.output_dim, "batch_targets")
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ContractError("inputs and targets need the same nonzero row count")

    layers = _unflatten(params.values, arch)
    activations = [x]
    pre_activations = []
    a = x
    for w, b in layers[:-1]:
        z = a @ w + b
        a = _activate(z, arch.activation)
        pre_activations.append(z)
        activations.append(a)
    w_out, b_out = layers[-1]
    pred = a @ w_out + b_out

    residual = pred - y
    n = x.shape[0]
    loss = float(np.mean(np.sum(residual**2, axis=1)))

    delta = 2.0 * residual / n
    grads: List[np.ndarray] = []
    for index in range(len(layers) - 1, -1, -1):
        w, _ = layers[index]
        grads.append(np.sum(delta, axis=0))
        grads.append((activations[index].T @ delta).ravel())
        if index > 0:
            z = pre_activations[index - 1]
            delta = (delta @ w.T) * _activation_grad(
                z, activations[index], arch.activation
            )
    grads.reverse()
    return loss, Gradient(np.concatenate(grads))


def sgd_step(params: ParameterVector, grad: Gradient, eta: float) -> ParameterVector:
    """theta - eta * grad. eta = 0 returns the same values bit for bit."""
    if len(params) != len(grad):
        raise ContractError(f"length mismatch: {len(params)} vs {len(grad)}")
    if eta < 0:
        raise ContractError(f"learning rate must be non-negative, got {eta}")
    updated = params.values - eta * grad.values
    if not np.all(np.isfinite(updated)):
        raise DivergenceError("SGD step produced non-finite parameters")
    return ParameterVector(updated, params.arch_id)


def serialize_params(params: ParameterVector) -> bytes:
    """u32 length followed by little-endian float64 values."""
    return struct.pack("<I", len(params)) + params.values.astype("<f8").tobytes()


def deserialize_params(data: bytes, arch: ModelArchitecture) -> ParameterVector:
    if len(data) < 4:
        raise ContractError("truncated parameter blob: missing length prefix")
    (count,) = struct.unpack_from("<I", data, 0)
    if count == 0:
        raise ContractError("parameter blob declares zero values")
    if len(data) != 4 + 8 * count:
        raise ContractError(
            f"parameter blob declares {count} values but carries "
            f"{len(data) - 4} payload bytes"
        )
    if count != arch.parameter_count:
        raise ContractError(
            f"blob holds {count} values, {arch.arch_id} needs {arch.parameter_count}"
        )
    values = np.frombuffer(data, dtype="<f8", count=count, offset=4)
    return ParameterVector(values.astype(np.float64), arch.arch_id)
