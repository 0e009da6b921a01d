import numpy as np
import pytest

from services.tensor_core import (
    Normal,
    Shape,
    TruncatedNormal,
    Uniform,
    as_tensor,
    channel_slice,
    check_finite,
    checksum,
    concat_channels,
    derive_seed,
    elementwise_mul,
    ones,
    sample,
    seeded_fill,
    shape_of,
    splitmix64,
    uniform_stream,
    zeros,
)
from utils.errors import ContractViolation


class TestConstruction:
    def test_zeros_is_exactly_zero(self):
        x = zeros((1, 1, 2, 2))
        assert x.shape == (1, 1, 2, 2)
        assert x.dtype == np.float64
        assert np.all(x == 0.0)

    def test_empty_batch(self):
        x = zeros((0, 3, 4, 4))
        assert x.size == 0
        assert shape_of(x) == Shape.of((0, 3, 4, 4)) and shape_of(x).size == 0

    def test_results_are_read_only(self):
        x = ones((1, 1, 2, 2))
        with pytest.raises(ValueError):
            x[0, 0, 0, 0] = 5.0

    def test_rank_and_sign_are_checked(self):
        with pytest.raises(ContractViolation):
            zeros((1, 2, 3))
        with pytest.raises(ContractViolation):
            zeros((1, -1, 2, 2))
        with pytest.raises(ContractViolation):
            as_tensor(np.zeros((2, 2)))

    def test_check_finite(self):
        bad = as_tensor(np.full((1, 1, 1, 2), np.nan))
        with pytest.raises(ContractViolation):
            check_finite(bad)


class TestElementwise:
    def test_hand_values(self):
        a = as_tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
        b = as_tensor(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))
        np.testing.assert_array_equal(elementwise_mul(a, b).ravel(), [3.0, 8.0])

    def test_identity_and_annihilator(self):
        a = seeded_fill((2, 3, 4, 4), 11, Normal())
        np.testing.assert_array_equal(elementwise_mul(a, ones(a.shape)), a)
        np.testing.assert_array_equal(elementwise_mul(a, zeros(a.shape)), zeros(a.shape))

    def test_mul_commutes_bitwise(self):
        a = seeded_fill((1, 2, 3, 3), 1, Normal())
        b = seeded_fill((1, 2, 3, 3), 2, Normal())
        assert elementwise_mul(a, b).tobytes() == elementwise_mul(b, a).tobytes()

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ContractViolation, match=r"\(1, 1, 2, 2\).*\(1, 1, 2, 3\)"):
            elementwise_mul(zeros((1, 1, 2, 2)), zeros((1, 1, 2, 3)))


class TestConcat:
    def test_band_order(self):
        a = seeded_fill((1, 2, 2, 2), 1, Normal())
        b = seeded_fill((1, 2, 2, 2), 2, Normal())
        out = concat_channels([a, b])
        assert out.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_round_trip_through_slices(self):
        parts = [seeded_fill((2, c, 3, 3), c, Normal()) for c in (1, 3, 2)]
        joined = concat_channels(parts)
        start = 0
        for part in parts:
            stop = start + part.shape[1]
            assert channel_slice(joined, start, stop).tobytes() == part.tobytes()
            start = stop

    def test_single_part_copy(self):
        a = seeded_fill((1, 2, 2, 2), 5, Normal())
        assert concat_channels([a]).tobytes() == a.tobytes()

    def test_errors(self):
        with pytest.raises(ContractViolation):
            concat_channels([])
        with pytest.raises(ContractViolation):
            concat_channels([zeros((1, 1, 2, 2)), zeros((1, 1, 3, 2))])
        with pytest.raises(ContractViolation):
            channel_slice(zeros((1, 2, 2, 2)), 1, 3)


class TestSeededFill:
    def test_determinism(self):
        a = seeded_fill((2, 3, 4, 4), 0, Normal())
        b = seeded_fill((2, 3, 4, 4), 0, Normal())
        assert a.tobytes() == b.tobytes()
        assert checksum(a) == checksum(b)

    def test_different_seeds_differ(self):
        assert checksum(seeded_fill((1, 1, 4, 4), 0, Normal())) != checksum(seeded_fill((1, 1, 4, 4), 1, Normal()))

    def test_degenerate_normal(self):
        x = seeded_fill((1, 2, 3, 3), 9, Normal(mean=1.5, std=0.0))
        assert np.all(x == 1.5)

    def test_uniform_mean(self):
        x = seeded_fill((1, 1, 100, 100), 3, Uniform(0.0, 1.0))
        assert 0.45 <= float(np.mean(x)) <= 0.55
        assert float(np.min(x)) >= 0.0 and float(np.max(x)) < 1.0

    def test_invalid_parameters(self):
        with pytest.raises(ContractViolation):
            seeded_fill((1, 1, 2, 2), 0, Uniform(1.0, 0.0))
        with pytest.raises(ContractViolation):
            seeded_fill((1, 1, 2, 2), 0, Normal(0.0, -1.0))

    def test_splitmix_reference_value(self):
        # First output of SplitMix64 seeded with 0
        assert int(splitmix64(0, 1)[0]) == 0xE220A8397B1DCDAF

    def test_uniform_stream_uses_top_53_bits(self):
        raw = int(splitmix64(42, 1)[0])
        assert uniform_stream(42, 1)[0] == (raw >> 11) * 2.0 ** -53

    def test_truncated_normal_respects_bound(self):
        values = sample(5000, 17, TruncatedNormal(0.0, 0.02))
        assert np.max(np.abs(values)) <= 0.04

    def test_derive_seed_is_stable_and_label_sensitive(self):
        assert derive_seed(0, "dw.0.weight") == derive_seed(0, "dw.0.weight")
        assert derive_seed(0, "dw.0.weight") != derive_seed(0, "dw.1.weight")
