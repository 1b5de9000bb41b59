import numpy as np
import pytest

from fedsim.channel import (
    UPLINK, DOWNLINK, AnalogFrame, ChannelState, downlink_bc, sample_channel,
    uplink_mac,
)
from fedsim.errors import ConfigurationError


def rng(seed=0):
    return np.random.default_rng(seed)


def frame(samples, direction=UPLINK, budget=None):
    samples = np.asarray(samples, dtype=np.complex128)
    if budget is None:
        budget = float(np.sum(np.abs(samples) ** 2)) / samples.size
    return AnalogFrame(samples=samples, direction=direction, power_budget=budget)


class TestSampleChannel:
    def test_same_seed_same_state(self):
        a = sample_channel(rng(7), 5)
        b = sample_channel(rng(7), 5)
        np.testing.assert_array_equal(a.uplink_gains, b.uplink_gains)
        np.testing.assert_array_equal(a.downlink_gains, b.downlink_gains)

    def test_cardinality(self):
        state = sample_channel(rng(1), 10)
        assert state.uplink_gains.shape == (10,)
        assert state.downlink_gains.shape == (10,)

    def test_unit_mean_square_gain(self):
        # Monte-Carlo estimate of E|h|^2 for unit-variance Rayleigh fading.
        state = sample_channel(rng(123), 100_000)
        for gains in (state.uplink_gains, state.downlink_gains):
            assert abs(np.mean(np.abs(gains) ** 2) - 1.0) < 0.02

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_channel(rng(0), 0)


class TestUplinkMac:
    def test_identity_channel(self):
        state = ChannelState(np.array([1 + 0j]), np.array([1 + 0j]))
        y = uplink_mac([frame([1 + 0j])], state, None)
        np.testing.assert_allclose(y, [1 + 0j])

    def test_superposition(self):
        state = ChannelState(np.array([1 + 0j, 1 + 0j]), np.ones(2, complex))
        y = uplink_mac([frame([1 + 0j]), frame([2 + 0j])], state, None)
        np.testing.assert_allclose(y, [3 + 0j])

    def test_complex_rotation(self):
        state = ChannelState(np.array([1j]), np.array([1 + 0j]))
        y = uplink_mac([frame([1 + 0j])], state, None)
        np.testing.assert_allclose(y, [1j])

    def test_linear_in_each_frame(self):
        gen = rng(5)
        for _ in range(10):
            k, t = 3, 8
            state = sample_channel(gen, k)
            base = [gen.standard_normal(t) + 1j * gen.standard_normal(t)
                    for _ in range(k)]
            scale = gen.standard_normal()
            y1 = uplink_mac([frame(x) for x in base], state, None)
            scaled = [frame(base[0] * scale)] + [frame(x) for x in base[1:]]
            y2 = uplink_mac(scaled, state, None)
            y_only0 = uplink_mac(
                [frame(base[0])] + [frame(np.zeros(t, complex))] * (k - 1),
                state, None)
            np.testing.assert_allclose(y2, y1 + (scale - 1) * y_only0,
                                       atol=1e-10)

    def test_noise_unit_variance(self):
        t = 100_000
        state = ChannelState(np.array([1 + 0j]), np.array([1 + 0j]))
        zero = frame(np.zeros(t, complex), budget=1.0)
        y = uplink_mac([zero], state, rng(99))
        var = np.mean(np.abs(y) ** 2)
        assert 0.98 <= var <= 1.02

    def test_mismatched_lengths_rejected(self):
        state = ChannelState(np.ones(2, complex), np.ones(2, complex))
        with pytest.raises(ConfigurationError):
            uplink_mac([frame([1 + 0j]), frame([1 + 0j, 2 + 0j])], state, None)


class TestDownlinkBc:
    def test_identity(self):
        state = ChannelState(np.ones(3, complex), np.ones(3, complex))
        received = downlink_bc(frame([2 + 0j], DOWNLINK), state, None)
        assert len(received) == 3
        for r in received:
            np.testing.assert_allclose(r, [2 + 0j])

    def test_zero_gain_pure_noise(self):
        state = ChannelState(np.ones(2, complex),
                             np.array([0 + 0j, 1 + 0j]))
        received = downlink_bc(frame([5 + 0j], DOWNLINK), state, rng(3))
        assert abs(received[0][0]) > 0           # noise only, almost surely
        assert abs(received[0][0] - 5) > 1e-6    # signal fully suppressed

    def test_per_device_scaling(self):
        state = ChannelState(np.ones(2, complex),
                             np.array([1 + 0j, 2 + 0j]))
        received = downlink_bc(frame([1 + 0j], DOWNLINK), state, None)
        np.testing.assert_allclose(received[0], [1 + 0j])
        np.testing.assert_allclose(received[1], [2 + 0j])

    def test_independent_noise_per_device(self):
        state = ChannelState(np.ones(2, complex), np.ones(2, complex))
        received = downlink_bc(frame(np.zeros(64, complex), DOWNLINK,
                                     budget=1.0), state, rng(11))
        assert not np.allclose(received[0], received[1])


class TestAnalogFramePower:
    def test_over_budget_rejected(self):
        with pytest.raises(ValueError):
            AnalogFrame(samples=np.array([2 + 0j]), direction=UPLINK,
                        power_budget=1.0)

    def test_at_budget_accepted(self):
        f = AnalogFrame(samples=np.array([1 + 0j, 1j]), direction=UPLINK,
                        power_budget=1.0)
        assert len(f) == 2
