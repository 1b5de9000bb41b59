import math

import numpy as np
import pytest

from fedsim.compression import (
    ErrorAccumulator, log2_binomial, sparse_binary_compress, top_k_sparsify,
)
from fedsim.digital_link import (
    BitBudget, downlink_budget, fd_digital_decode, fd_digital_encode,
    fl_digital_decode, fl_digital_encode, uplink_budget,
)
from fedsim.errors import DecodeError


def budget_of(bits, direction="uplink"):
    return BitBudget(direction=direction, device=0, bits=bits)


class TestUplinkBudget:
    def test_zero_power(self):
        assert uplink_budget(100, 4, 1 + 0j, 0.0).bits == 0.0

    def test_zero_gain(self):
        assert uplink_budget(100, 4, 0j, 5.0).bits == 0.0

    def test_reference_value(self):
        # (2500/10) * log2(1 + 1*10*1) = 250 * log2(11)
        b = uplink_budget(2500, 10, 1 + 0j, 1.0)
        assert abs(b.bits - 864.8579046593243) < 1e-9

    def test_monotone_in_everything(self):
        base = uplink_budget(100, 4, 0.8 + 0.3j, 1.0).bits
        assert uplink_budget(200, 4, 0.8 + 0.3j, 1.0).bits >= base
        assert uplink_budget(100, 4, 1.6 + 0.6j, 1.0).bits >= base
        assert uplink_budget(100, 4, 0.8 + 0.3j, 2.0).bits >= base


class TestDownlinkBudget:
    def test_zero_gain_dominates(self):
        assert downlink_budget(100, np.array([0j, 1 + 0j]), 1.0).bits == 0.0

    def test_reference_value(self):
        gains = np.array([1.0 + 0j, math.sqrt(3) + 0j])
        b = downlink_budget(100, gains, 1.0)
        assert abs(b.bits - 100.0) < 1e-9

    def test_single_user(self):
        b = downlink_budget(50, np.array([1 + 0j]), 3.0)
        assert abs(b.bits - 50 * math.log2(4)) < 1e-12


class TestFlDigital:
    def test_infeasible_budget_carries_residual(self):
        update = np.array([1.0, -2.0, 3.0, -4.0])
        payload, acc = fl_digital_encode(update, ErrorAccumulator.zeros(4),
                                         budget_of(0.0), 16)
        assert payload.is_empty
        np.testing.assert_array_equal(acc.residual, update)
        np.testing.assert_array_equal(fl_digital_decode(payload, 4),
                                      np.zeros(4))

    def test_q_choice_matches_scan(self):
        gen = np.random.default_rng(0)
        update = gen.standard_normal(1000)
        budget = budget_of(100.0)
        payload, _ = fl_digital_encode(update, ErrorAccumulator.zeros(1000),
                                       budget, 16)
        best = 0
        for q in range(1, 501):
            if 16 + log2_binomial(1000, q) <= 100.0:
                best = q
        assert abs(payload.bit_count - (16 + log2_binomial(1000, best))) < 1e-9

    def test_roundtrip_structure(self):
        gen = np.random.default_rng(1)
        for _ in range(10):
            update = gen.standard_normal(200)
            payload, _ = fl_digital_encode(update,
                                           ErrorAccumulator.zeros(200),
                                           budget_of(60.0), 16)
            decoded = fl_digital_decode(payload, 200)
            nz = decoded[decoded != 0]
            assert nz.size <= 2 * payload.indices.size
            if nz.size:
                assert np.unique(nz).size == 1

    def test_bit_count_never_exceeds_budget(self):
        gen = np.random.default_rng(2)
        for bits_budget in (17.0, 40.0, 113.5, 900.0):
            update = gen.standard_normal(300)
            payload, _ = fl_digital_encode(update,
                                           ErrorAccumulator.zeros(300),
                                           budget_of(bits_budget), 16)
            assert payload.bit_count <= bits_budget

    def test_high_precision_matches_sparsifier(self):
        # Unbounded budget and 53-bit values reproduce the raw compressor.
        gen = np.random.default_rng(3)
        update = gen.standard_normal(64)
        acc = ErrorAccumulator(gen.standard_normal(64))
        payload, _ = fl_digital_encode(update, acc, budget_of(math.inf), 53)
        expected = sparse_binary_compress(update + acc.residual, 32)
        decoded = fl_digital_decode(payload, 64)
        np.testing.assert_allclose(decoded, expected, rtol=1e-9, atol=1e-15)

    def test_error_feedback_uses_dequantized_value(self):
        update = np.array([4.0, -1.0, 0.5, -0.25])
        payload, acc = fl_digital_encode(update, ErrorAccumulator.zeros(4),
                                         budget_of(30.0), 16)
        sent = fl_digital_decode(payload, 4)
        np.testing.assert_allclose(acc.residual, update - sent)

    def test_corrupt_index_rejected(self):
        update = np.array([4.0, -1.0, 0.5, -0.25])
        payload, _ = fl_digital_encode(update, ErrorAccumulator.zeros(4),
                                       budget_of(30.0), 16)
        bad = payload.__class__(length=payload.length,
                                indices=np.array([7]),
                                values=payload.values,
                                quantizer_meta=payload.quantizer_meta,
                                bit_count=payload.bit_count)
        with pytest.raises(DecodeError):
            fl_digital_decode(bad, 4)


class TestFdDigital:
    def test_q_choice_matches_scan(self):
        gen = np.random.default_rng(4)
        table = gen.standard_normal((10, 10))
        payload = fd_digital_encode(table, budget_of(1000.0), 16)
        best = 0
        for q in range(1, 11):
            if 10 * (16 * q + log2_binomial(10, q)) <= 1000.0:
                best = q
        assert best == 5  # frozen from the scan oracle
        assert payload.indices.shape == (10, best)
        assert abs(payload.bit_count
                   - 10 * (16 * best + log2_binomial(10, best))) < 1e-9

    def test_infeasible_budget(self):
        table = np.ones((4, 4))
        payload = fd_digital_encode(table, budget_of(10.0), 16)
        assert payload.is_empty
        np.testing.assert_array_equal(fd_digital_decode(payload, 4),
                                      np.zeros((4, 4)))

    def test_full_q_preserves_rows_up_to_quantization(self):
        gen = np.random.default_rng(5)
        table = gen.standard_normal((5, 5))
        payload = fd_digital_encode(table, budget_of(1e9), 16)
        decoded = fd_digital_decode(payload, 5)
        step = np.ptp(table, axis=1) / (2 ** 16 - 1)
        assert np.all(np.abs(decoded - table) <= step[:, None] / 2 + 1e-12)

    def test_kept_support_is_top_q(self):
        gen = np.random.default_rng(6)
        table = gen.standard_normal((6, 6))
        payload = fd_digital_encode(table, budget_of(250.0), 16)
        q = payload.indices.shape[1]
        decoded = fd_digital_decode(payload, 6)
        for row in range(6):
            expected = top_k_sparsify(table[row], q)
            support = np.flatnonzero(expected)
            assert set(payload.indices[row]) == set(support)
            half = (table[row].max() - table[row].min()) / (2 * (2 ** 16 - 1))
            assert np.max(np.abs(decoded[row, support]
                                 - expected[support])) <= half + 1e-12

    def test_bit_count_within_budget(self):
        gen = np.random.default_rng(7)
        for budget in (80.0, 260.0, 2000.0):
            table = gen.standard_normal((8, 8))
            payload = fd_digital_encode(table, budget_of(budget), 16)
            assert payload.bit_count <= budget
