"""
Unit tests for pairwise-masked secure aggregation.
"""

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import chisquare

from errors import ConfigError, ContractError, SecureAggregationError
from model_core import ParameterVector
from secure_aggregation import (
    MaskSeedMatrix,
    MaskedUpdate,
    QuantizationSpec,
    aggregate_masked,
    count_clipped,
    decode_masked_update,
    dequantize,
    derive_mask,
    encode_masked_update,
    mask_update,
    quantize,
)

SPEC = QuantizationSpec()


class TestQuantization:
    def test_round_trip_within_half_step(self):
        values = np.array([0.0, 1.0, -1.0, 3.14159, -63.9])
        restored = dequantize(quantize(values, 1.0, SPEC), SPEC)
        assert np.all(np.abs(restored - values) <= 2.0 ** -(SPEC.scale_bits + 1))

    def test_negative_values_use_twos_complement(self):
        words = quantize(np.array([-1.0]), 1.0, SPEC)
        assert words.dtype == np.uint64
        assert int(words[0]) == 2**64 - 2**SPEC.scale_bits

    def test_clipping(self):
        values = np.array([100.0, -100.0, 1.0])
        assert count_clipped(values, SPEC) == 2
        restored = dequantize(quantize(values, 1.0, SPEC), SPEC)
        assert list(restored[:2]) == [64.0, -64.0]

    def test_weight_outside_unit_interval_rejected(self):
        with pytest.raises(ContractError):
            quantize(np.zeros(2), 1.5, SPEC)

    def test_scale_bits_range_enforced(self):
        with pytest.raises(ValidationError):
            QuantizationSpec(scale_bits=7)
        with pytest.raises(ValidationError):
            QuantizationSpec(scale_bits=41)

    def test_capacity_check(self):
        SPEC.check_capacity(3)
        with pytest.raises(ConfigError):
            QuantizationSpec(scale_bits=40, clip_range=1e7).check_capacity(3)


class TestMasks:
    def test_seed_matrix_is_symmetric_and_pairwise_distinct(self):
        seeds = MaskSeedMatrix.derive(b"secret", [3, 1, 2])
        assert seeds.seed_for(1, 2) == seeds.seed_for(2, 1)
        assert len({seeds.seed_for(1, 2), seeds.seed_for(1, 3), seeds.seed_for(2, 3)}) == 3
        assert seeds.seed_for(1, 2) < 2**128

    def test_seed_derivation_is_deterministic(self):
        a = MaskSeedMatrix.derive(b"secret", [1, 2])
        b = MaskSeedMatrix.derive(b"secret", [2, 1])
        c = MaskSeedMatrix.derive(b"other", [1, 2])
        assert a.seed_for(1, 2) == b.seed_for(1, 2) != c.seed_for(1, 2)

    def test_unknown_pair_rejected(self):
        with pytest.raises(SecureAggregationError):
            MaskSeedMatrix.derive(b"s", [1, 2]).seed_for(1, 3)

    def test_opposite_signs_cancel(self):
        plus = derive_mask(12345, 7, +1, 50)
        minus = derive_mask(12345, 7, -1, 50)
        assert np.all(plus + minus == 0)

    def test_rounds_get_fresh_masks(self):
        assert not np.array_equal(derive_mask(99, 1, 1, 20), derive_mask(99, 2, 1, 20))

    def test_mask_bytes_look_uniform(self):
        words = derive_mask(2**100 + 17, 3, 1, 4096)
        low_bytes = (words & np.uint64(0xFF)).astype(np.int64)
        counts = np.bincount(low_bytes, minlength=256)
        assert chisquare(counts).pvalue > 1e-4

    def test_bad_arguments_rejected(self):
        with pytest.raises(ContractError):
            derive_mask(1, 1, 0, 4)
        with pytest.raises(ContractError):
            derive_mask(1, 1, 1, 0)


class TestSecureSum:
    def test_matches_plaintext_weighted_sum_over_random_trials(self):
        rng = np.random.default_rng(77)
        plants = [1, 2, 3]
        bound = len(plants) * 2.0 ** -(SPEC.scale_bits + 1)
        for trial in range(1000):
            q = int(rng.integers(1, 201))
            seeds = MaskSeedMatrix.derive(trial.to_bytes(4, "little"), plants)
            raw = rng.random(len(plants)) + 0.1
            weights = raw / raw.sum()
            thetas = [ParameterVector(rng.uniform(-5, 5, size=q), "arch") for _ in plants]

            updates = [
                mask_update(theta, w, pid, plants, seeds, trial + 1, SPEC)
                for theta, w, pid in zip(thetas, weights, plants)
            ]
            mask_total = np.zeros(q, dtype=np.uint64)
            for update, theta, w in zip(updates, thetas, weights):
                mask_total += update.masked_values - quantize(theta.values, w, SPEC)
            assert np.all(mask_total == 0)

            secure = aggregate_masked(updates, SPEC, plants, "arch").values
            plain = sum(w * theta.values for w, theta in zip(weights, thetas))
            tolerance = bound + 3 * np.spacing(np.abs(plain).max() + 1.0)
            assert np.max(np.abs(secure - plain)) <= tolerance

    def test_single_masked_update_hides_the_parameters(self):
        seeds = MaskSeedMatrix.derive(b"k", [1, 2])
        theta = ParameterVector(np.zeros(64), "arch")
        update = mask_update(theta, 0.5, 1, [1, 2], seeds, 1, SPEC)
        # a zero vector quantizes to zero words; the masked words are not
        assert np.count_nonzero(update.masked_values) > 60

    def test_changing_one_parameter_moves_only_its_masked_word(self):
        seeds = MaskSeedMatrix.derive(b"k", [1, 2, 3])
        rng = np.random.default_rng(5)
        values = rng.uniform(-10, 10, size=32)
        flipped = values.copy()
        flipped[11] = -flipped[11]
        a = mask_update(ParameterVector(values, "a"), 0.4, 2, [1, 2, 3], seeds, 6, SPEC)
        b = mask_update(ParameterVector(flipped, "a"), 0.4, 2, [1, 2, 3], seeds, 6, SPEC)
        changed = np.flatnonzero(a.masked_values != b.masked_values)
        assert list(changed) == [11]
        # modular difference, taken on arrays so uint64 wraparound is silent
        expected = quantize(flipped, 0.4, SPEC)[11:12] - quantize(values, 0.4, SPEC)[11:12]
        assert np.array_equal(b.masked_values[11:12] - a.masked_values[11:12], expected)

    def test_masked_words_are_uniform_across_session_secrets(self):
        theta = ParameterVector(np.array([1.5, -0.25]), "a")
        counts = np.zeros(256, dtype=np.int64)
        for secret in range(10_000):
            seeds = MaskSeedMatrix.derive(secret.to_bytes(4, "little"), [1, 2])
            word = mask_update(theta, 0.5, 1, [1, 2], seeds, 1, SPEC).masked_values[0]
            counts += np.bincount(np.frombuffer(word.tobytes(), dtype=np.uint8), minlength=256)
        assert counts.sum() == 80_000
        assert chisquare(counts).pvalue > 1e-3

    def test_order_of_arrival_is_irrelevant(self):
        seeds = MaskSeedMatrix.derive(b"k", [1, 2, 3])
        rng = np.random.default_rng(0)
        updates = [
            mask_update(ParameterVector(rng.normal(size=10), "a"), 1 / 3, pid, [1, 2, 3], seeds, 4, SPEC)
            for pid in (1, 2, 3)
        ]
        forward = aggregate_masked(updates, SPEC, [1, 2, 3], "a").values
        backward = aggregate_masked(updates[::-1], SPEC, [1, 2, 3], "a").values
        assert np.array_equal(forward, backward)

    def test_missing_plant_aborts(self):
        seeds = MaskSeedMatrix.derive(b"k", [1, 2, 3])
        theta = ParameterVector(np.ones(4), "a")
        updates = [mask_update(theta, 0.5, pid, [1, 2, 3], seeds, 1, SPEC) for pid in (1, 2)]
        with pytest.raises(SecureAggregationError, match="no update from plants \\[3\\]"):
            aggregate_masked(updates, SPEC, [1, 2, 3], "a")

    def test_duplicate_and_mixed_round_updates_rejected(self):
        a = MaskedUpdate(1, 1, np.zeros(3, dtype=np.uint64))
        b = MaskedUpdate(2, 2, np.zeros(3, dtype=np.uint64))
        with pytest.raises(SecureAggregationError, match="duplicate"):
            aggregate_masked([a, a], SPEC, [1], "x")
        with pytest.raises(SecureAggregationError, match="mix rounds"):
            aggregate_masked([a, b], SPEC, [1, 2], "x")

    def test_length_mismatch_rejected(self):
        a = MaskedUpdate(1, 1, np.zeros(3, dtype=np.uint64))
        b = MaskedUpdate(2, 1, np.zeros(4, dtype=np.uint64))
        with pytest.raises(SecureAggregationError):
            aggregate_masked([a, b], SPEC, [1, 2], "x")


class TestMaskedUpdateEncoding:
    def test_encoding_layout(self):
        update = MaskedUpdate(7, 2, np.array([1, 2**64 - 1], dtype=np.uint64))
        data = encode_masked_update(update)
        assert data[:12] == (7).to_bytes(4, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert data[-8:] == b"\xff" * 8
        decoded, end = decode_masked_update(data)
        assert end == len(data)
        assert decoded.plant_id == 7 and decoded.round_index == 2
        assert np.array_equal(decoded.masked_values, update.masked_values)

    def test_truncated_payload_rejected(self):
        data = encode_masked_update(MaskedUpdate(1, 1, np.ones(4, dtype=np.uint64)))
        with pytest.raises(ContractError):
            decode_masked_update(data[:-3])
        with pytest.raises(ContractError):
            decode_masked_update(data[:10])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
