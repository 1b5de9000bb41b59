"""Over-the-air computation: analog joint source-channel coding.

Weight updates are magnitude-top-q sparsified, passed through a shared
Gaussian random projection, packed two reals per complex channel use, and
sent simultaneously at full power with transmit-side phase rotation so the
superposition arrives coherently. The receiver applies a scalar
minimum-mean-square-error factor and a soft-threshold message-passing
decoder to recover the sum. Logit tables are small enough to skip the
projection; they use integer-redundancy repetition coding instead.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .channel import (
    DOWNLINK, UPLINK, AnalogFrame, ChannelState, downlink_bc, uplink_mac,
)
from .compression import ErrorAccumulator, accumulate_error, top_k_sparsify
from .errors import ConfigurationError


@dataclass(frozen=True)
class ProjectionMatrix:
    """Seeded Gaussian projection shared verbatim by transmitter and receiver.

    Entries are i.i.d. zero-mean with variance 1/rows, so projecting a
    vector roughly preserves its squared norm. Regenerating from the same
    (rows, cols, seed) triple is bit-exact.
    """

    rows: int
    cols: int
    seed: int

    @cached_property
    def matrix(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((self.rows, self.cols)) / math.sqrt(self.rows)


@dataclass(frozen=True)
class RepetitionCode:
    """Integer bandwidth expansion: repeat a block rho times, decode by mean."""

    rho: int
    block: int

    def __post_init__(self):
        if self.rho < 1:
            raise ConfigurationError(
                "redundancy must be at least 1; the payload does not fit the "
                "channel (reduce the block or raise the channel uses)")


def pack_complex(v: np.ndarray) -> np.ndarray:
    """Fold an even-length real vector into complex samples, two per use."""
    v = np.asarray(v, dtype=np.float64)
    if v.size % 2:
        raise ValueError("pack_complex needs an even length; pad upstream")
    return v[0::2] + 1j * v[1::2]


def unpack_complex(x: np.ndarray) -> np.ndarray:
    """Inverse of pack_complex."""
    x = np.asarray(x, dtype=np.complex128)
    out = np.empty(2 * x.size, dtype=np.float64)
    out[0::2] = x.real
    out[1::2] = x.imag
    return out


def full_power_gain(x: np.ndarray, power: float, channel_uses: int) -> float:
    """Transmit scale sqrt(P*T)/||x||; zero for an all-zero payload."""
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return 0.0
    return math.sqrt(power * channel_uses) / norm


def precompensate(x: np.ndarray, gain: complex, power: float,
                  channel_uses: int, direction: str = UPLINK) -> AnalogFrame:
    """Scale to full power and pre-rotate away the channel phase.

    The payload occupies the leading entries of the frame; unused channel
    uses (when the payload is shorter than T) carry zeros, so the whole
    energy budget P*T is spent on the payload.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.size > channel_uses:
        raise ConfigurationError(
            f"payload of {x.size} samples exceeds {channel_uses} channel uses")
    samples = np.zeros(channel_uses, dtype=np.complex128)
    scale = full_power_gain(x, power, channel_uses)
    if scale > 0.0:
        phase = 1.0 if gain == 0 else np.conj(gain) / abs(gain)
        samples[:x.size] = scale * phase * x
    return AnalogFrame(samples=samples, direction=direction,
                       power_budget=power)


def mmse_factor_uplink(gammas: np.ndarray, habs: np.ndarray) -> float:
    """Scalar MMSE factor for the coherent multi-access superposition."""
    amps = np.asarray(gammas, dtype=np.float64) * np.asarray(habs, dtype=np.float64)
    if amps.size < 1:
        raise ValueError("need at least one transmitter")
    return float(amps.sum() / (0.5 + np.sum(amps ** 2)))


def mmse_scale_uplink(y: np.ndarray, gammas: np.ndarray,
                      habs: np.ndarray) -> np.ndarray:
    return mmse_factor_uplink(gammas, habs) * np.asarray(y)


def mmse_factor_downlink(gamma: float, gabs: float) -> float:
    """Scalar MMSE factor at one device for the broadcast signal."""
    amp = gamma * gabs
    return amp / (0.5 + amp ** 2)


def mmse_scale_downlink(y: np.ndarray, gamma: float, gabs: float) -> np.ndarray:
    return mmse_factor_downlink(gamma, gabs) * np.asarray(y)


def repetition_encode(s: np.ndarray, rho: int) -> np.ndarray:
    """Stack the block rho times."""
    s = np.asarray(s, dtype=np.float64)
    RepetitionCode(rho=rho, block=s.size)
    return np.tile(s, rho)


def repetition_decode(v: np.ndarray, rho: int) -> np.ndarray:
    """Average the rho repetitions; cuts noise variance by the redundancy."""
    v = np.asarray(v, dtype=np.float64)
    if rho < 1 or v.size % rho:
        raise ValueError(f"length {v.size} not divisible by redundancy {rho}")
    return v.reshape(rho, v.size // rho).mean(axis=0)


def _soft_threshold(v: np.ndarray, thresh: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def cs_decode(projection: ProjectionMatrix, y_est: np.ndarray, q: int,
              kappa: float = 1.5, max_iter: int = 50,
              tol: float = 1e-6) -> np.ndarray:
    """Approximate message passing with a soft-threshold denoiser.

    The threshold tracks kappa times a robust noise estimate (median
    absolute deviation of the residual). Iterations stop at max_iter, when
    the residual norm stalls (relative change below tol), or when it grows
    past ten times its running minimum; the best-residual iterate is
    returned, which makes divergence a graceful fallback.
    """
    A = projection.matrix
    m, n = A.shape
    y = np.asarray(y_est, dtype=np.float64)
    if y.shape != (m,):
        raise ValueError(f"measurement length {y.shape} does not match {m} rows")
    if not 0 <= q <= n:
        raise ValueError(f"sparsity hint {q} out of range for dimension {n}")

    x = np.zeros(n)
    z = y.copy()
    best_x = x
    best_res = float(np.linalg.norm(z))
    prev_res = best_res
    if best_res == 0.0:
        return best_x
    for _ in range(max_iter):
        sigma = float(np.median(np.abs(z))) / 0.6745
        r = x + A.T @ z
        x = _soft_threshold(r, kappa * sigma)
        z = y - A @ x + (np.count_nonzero(x) / m) * z  # Onsager correction
        res = float(np.linalg.norm(z))
        if res < best_res:
            best_res = res
            best_x = x
        if res > 10.0 * best_res:
            break
        if abs(res - prev_res) <= tol * max(prev_res, 1e-300):
            break
        prev_res = res
    return best_x


def fl_analog_uplink(updates, accs, q: int, projection: ProjectionMatrix,
                     state: ChannelState, power: float, channel_uses: int,
                     noise_rng, kappa: float = 1.5, max_iter: int = 50):
    """One over-the-air round for weight updates: returns (sum estimate, accs).

    Each device sparsifies its pending vector (update plus residual),
    projects, packs, and transmits at full power with phase rotation; the
    receiver applies the MMSE factor and message-passing recovery of the
    superposed sum. Residuals are advanced by exactly what was put on the
    air (the sparsified vector), not by what the receiver recovered.
    """
    updates = [np.asarray(u, dtype=np.float64) for u in updates]
    dim = updates[0].size
    if projection.cols != dim or projection.rows != 2 * channel_uses:
        raise ConfigurationError("projection shape does not match link")
    frames = []
    gammas = np.zeros(len(updates))
    new_accs = []
    for k, (update, acc) in enumerate(zip(updates, accs)):
        sparse = top_k_sparsify(update + acc.residual, q)
        new_accs.append(accumulate_error(acc, update, sparse))
        x = pack_complex(projection.matrix @ sparse)
        gammas[k] = full_power_gain(x, power, channel_uses)
        frames.append(precompensate(x, state.uplink_gains[k], power,
                                    channel_uses, UPLINK))
    received = uplink_mac(frames, state, noise_rng)
    scaled = mmse_scale_uplink(received, gammas,
                               np.abs(state.uplink_gains))
    estimate = cs_decode(projection, unpack_complex(scaled),
                         min(dim, q * len(updates)), kappa=kappa,
                         max_iter=max_iter)
    return estimate, new_accs


def fd_analog_uplink(tables, state: ChannelState, power: float,
                     channel_uses: int, noise_rng) -> np.ndarray:
    """One over-the-air round for logit tables: returns the table-sum estimate."""
    tables = [np.asarray(t, dtype=np.float64) for t in tables]
    num_labels = tables[0].shape[0]
    block = num_labels * num_labels
    rho = (2 * channel_uses) // block
    code = RepetitionCode(rho=rho, block=block)
    frames = []
    gammas = np.zeros(len(tables))
    payload_len = None
    for k, table in enumerate(tables):
        encoded = repetition_encode(table.ravel(), code.rho)
        if encoded.size % 2:
            encoded = np.append(encoded, 0.0)
        x = pack_complex(encoded)
        payload_len = x.size
        gammas[k] = full_power_gain(x, power, channel_uses)
        frames.append(precompensate(x, state.uplink_gains[k], power,
                                    channel_uses, UPLINK))
    received = uplink_mac(frames, state, noise_rng)
    scaled = mmse_scale_uplink(received, gammas, np.abs(state.uplink_gains))
    reals = unpack_complex(scaled[:payload_len])[:code.rho * block]
    return repetition_decode(reals, code.rho).reshape(num_labels, num_labels)


def _receive_rotate(y: np.ndarray, gain: complex) -> np.ndarray:
    # Devices know their own downlink channel; undo its phase before scaling.
    if gain == 0:
        return np.asarray(y)
    return np.asarray(y) * (np.conj(gain) / abs(gain))


def fl_analog_downlink(update: np.ndarray, acc: ErrorAccumulator, q: int,
                       projection: ProjectionMatrix, state: ChannelState,
                       power: float, channel_uses: int, noise_rng,
                       kappa: float = 1.5, max_iter: int = 50):
    """Broadcast a weight vector analogically; returns (per-device estimates, acc)."""
    update = np.asarray(update, dtype=np.float64)
    if projection.cols != update.size or projection.rows != 2 * channel_uses:
        raise ConfigurationError("projection shape does not match link")
    sparse = top_k_sparsify(update + acc.residual, q)
    new_acc = accumulate_error(acc, update, sparse)
    x = pack_complex(projection.matrix @ sparse)
    gamma = full_power_gain(x, power, channel_uses)
    frame = precompensate(x, 1.0 + 0j, power, channel_uses, DOWNLINK)
    receptions = downlink_bc(frame, state, noise_rng)
    estimates = []
    for gain, y in zip(state.downlink_gains, receptions):
        scaled = mmse_scale_downlink(_receive_rotate(y, gain), gamma, abs(gain))
        estimates.append(cs_decode(projection, unpack_complex(scaled),
                                   min(update.size, q), kappa=kappa,
                                   max_iter=max_iter))
    return estimates, new_acc


def fd_analog_downlink(table: np.ndarray, state: ChannelState, power: float,
                       channel_uses: int, noise_rng) -> list[np.ndarray]:
    """Broadcast a logit table analogically; returns per-device table estimates."""
    table = np.asarray(table, dtype=np.float64)
    num_labels = table.shape[0]
    block = num_labels * num_labels
    rho = (2 * channel_uses) // block
    code = RepetitionCode(rho=rho, block=block)
    encoded = repetition_encode(table.ravel(), code.rho)
    if encoded.size % 2:
        encoded = np.append(encoded, 0.0)
    x = pack_complex(encoded)
    gamma = full_power_gain(x, power, channel_uses)
    frame = precompensate(x, 1.0 + 0j, power, channel_uses, DOWNLINK)
    receptions = downlink_bc(frame, state, noise_rng)
    estimates = []
    for gain, y in zip(state.downlink_gains, receptions):
        scaled = mmse_scale_downlink(_receive_rotate(y[:x.size], gain),
                                     gamma, abs(gain))
        reals = unpack_complex(scaled)[:code.rho * block]
        estimates.append(repetition_decode(reals, code.rho)
                         .reshape(num_labels, num_labels))
    return estimates
