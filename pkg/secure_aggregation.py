"""
Secure aggregation with pairwise additive masks over fixed-point integers.

Each plant scales its parameters by its aggregation weight, quantizes them to
two's-complement u64 words, and adds one pseudorandom stream per peer. The
plant with the smaller id adds the stream shared with a peer and the larger
one subtracts it, so the modular sum of all masked vectors equals the sum of
the quantized weighted parameters. The server only ever holds masked words.

Pairwise seeds are pre-shared: both plants of a pair derive the same 128-bit
seed from a common secret with HKDF.
"""

import logging
import struct
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigError, ContractError, SecureAggregationError
from model_core import ParameterVector

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<III")


class QuantizationSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scale_bits: int = Field(24, ge=8, le=40)
    clip_range: float = Field(64.0, gt=0.0)

    @property
    def multiplier(self) -> float:
        return float(2**self.scale_bits)

    def check_capacity(self, n_plants: int) -> None:
        """The true (unmasked) sum must fit a signed 64-bit word."""
        if self.clip_range * self.multiplier >= 2**62 / max(n_plants, 1):
            raise ConfigError(
                f"clip_range {self.clip_range} with scale_bits {self.scale_bits} "
                f"can overflow for {n_plants} plants"
            )

    def error_bound(self, n_plants: int) -> float:
        """Worst-case per-coordinate rounding error of a decoded aggregate."""
        return n_plants * 2.0 ** -(self.scale_bits + 1)


@dataclass(frozen=True)
class MaskSeedMatrix:
    """128-bit seed per unordered plant pair."""

    seeds: Dict[Tuple[int, int], int]

    @classmethod
    def derive(cls, secret: bytes, plant_ids: Iterable[int]) -> "MaskSeedMatrix":
        seeds = {}
        for j, k in combinations(sorted(set(plant_ids)), 2):
            hkdf = HKDF(
                algorithm=hashes.SHA256(),
                length=16,
                salt=None,
                info=f"fedplant-mask|{j}|{k}".encode("ascii"),
            )
            seeds[(j, k)] = int.from_bytes(hkdf.derive(secret), "little")
        return cls(seeds)

    def seed_for(self, a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        try:
            return self.seeds[key]
        except KeyError:
            raise SecureAggregationError(f"no mask seed for plant pair {key}") from None


@dataclass(frozen=True, eq=False)
class MaskedUpdate:
    plant_id: int
    round_index: int
    masked_values: np.ndarray

    def __post_init__(self):
        words = np.array(self.masked_values, dtype=np.uint64)
        if words.ndim != 1 or len(words) == 0:
            raise ContractError("masked_values must be a nonempty flat vector")
        words.setflags(write=False)
        object.__setattr__(self, "masked_values", words)

    def __len__(self) -> int:
        return len(self.masked_values)


def count_clipped(values: np.ndarray, spec: QuantizationSpec) -> int:
    return int(np.count_nonzero(np.abs(values) > spec.clip_range))


def quantize(
    values: np.ndarray, weight: float, spec: QuantizationSpec
) -> np.ndarray:
    """round(clip(v) * w * 2^scale_bits) as two's-complement u64 words."""
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"aggregation weight must be in [0, 1], got {weight}")
    clipped = np.clip(np.asarray(values, dtype=np.float64), -spec.clip_range, spec.clip_range)
    fixed = np.rint(clipped * weight * spec.multiplier).astype(np.int64)
    return fixed.view(np.uint64)


def dequantize(words: np.ndarray, spec: QuantizationSpec) -> np.ndarray:
    signed = np.asarray(words, dtype=np.uint64).view(np.int64)
    return signed.astype(np.float64) / spec.multiplier


def derive_mask(seed: int, round_index: int, sign: int, q: int) -> np.ndarray:
    """
    Philox stream keyed by the pair seed; the round index sits in its own
    counter word so every round gets a disjoint stream.
    """
    if q < 1:
        raise ContractError("mask length must be >= 1")
    if sign not in (1, -1):
        raise ContractError(f"sign must be +1 or -1, got {sign}")
    counter = np.array([0, 0, round_index, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=seed, counter=counter)
    stream = bitgen.random_raw(q).astype(np.uint64)
    if sign < 0:
        return np.zeros(q, dtype=np.uint64) - stream
    return stream


def mask_update(
    params: ParameterVector,
    weight: float,
    plant_id: int,
    peers: Sequence[int],
    seeds: MaskSeedMatrix,
    round_index: int,
    spec: QuantizationSpec,
) -> MaskedUpdate:
    clipped = count_clipped(params.values, spec)
    if clipped:
        logger.warning(
            "plant %d round %d: %d parameters clipped to +/-%s",
            plant_id,
            round_index,
            clipped,
            spec.clip_range,
        )
    masked = quantize(params.values, weight, spec)
    q = len(masked)
    for peer in sorted(set(peers) - {plant_id}):
        sign = 1 if plant_id < peer else -1
        masked = masked + derive_mask(seeds.seed_for(plant_id, peer), round_index, sign, q)
    return MaskedUpdate(plant_id, round_index, masked)


def aggregate_masked(
    updates: Sequence[MaskedUpdate],
    spec: QuantizationSpec,
    expected_plants: Sequence[int],
    arch_id: str,
) -> ParameterVector:
    """
    Sum the masked words of every plant (masks cancel) and decode the sum as
    signed fixed point.
    """
    by_plant: Dict[int, MaskedUpdate] = {}
    for update in updates:
        if update.plant_id in by_plant:
            raise SecureAggregationError(f"duplicate update from plant {update.plant_id}")
        by_plant[update.plant_id] = update
    missing = sorted(set(expected_plants) - set(by_plant))
    if missing:
        raise SecureAggregationError(f"round aborted: no update from plants {missing}")
    unknown = sorted(set(by_plant) - set(expected_plants))
    if unknown:
        raise SecureAggregationError(f"updates from unregistered plants {unknown}")
    rounds = {u.round_index for u in by_plant.values()}
    if len(rounds) != 1:
        raise SecureAggregationError(f"updates mix rounds {sorted(rounds)}")
    lengths = {len(u) for u in by_plant.values()}
    if len(lengths) != 1:
        raise SecureAggregationError(f"updates have different lengths {sorted(lengths)}")

    total = np.zeros(lengths.pop(), dtype=np.uint64)
    for plant_id in sorted(by_plant):
        total = total + by_plant[plant_id].masked_values
    return ParameterVector(dequantize(total, spec), arch_id)


def encode_masked_update(update: MaskedUpdate) -> bytes:
    """plant_id u32, round u32, q u32, then q little-endian u64 words."""
    return _HEADER.pack(update.plant_id, update.round_index, len(update)) + (
        update.masked_values.astype("<u8").tobytes()
    )


def decode_masked_update(data: bytes, offset: int = 0) -> Tuple[MaskedUpdate, int]:
    if len(data) - offset < _HEADER.size:
        raise ContractError("truncated masked update header")
    plant_id, round_index, q = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    end = offset + 8 * q
    if q == 0 or end > len(data):
        raise ContractError(f"masked update declares {q} words, payload is shorter")
    words = np.frombuffer(data, dtype="<u8", count=q, offset=offset).astype(np.uint64)
    return MaskedUpdate(plant_id, round_index, words), end

