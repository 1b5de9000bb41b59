"""Sparsification, scalar quantization, error feedback, and bit accounting.

These are the primitives shared by both digital pipelines: sign-mean sparse
compression for weight updates, magnitude top-k for logit rows, a uniform
mid-tread quantizer over the empirical value range, and the combinatorial
index-cost bookkeeping used to pick the largest sparsity level that fits a
capacity budget.
"""

import math
from dataclasses import dataclass

import numpy as np

LN2 = math.log(2.0)


def sparse_binary_compress(u: np.ndarray, q: int) -> np.ndarray:
    """Keep the q largest and q smallest entries, collapse to one sign's mean.

    Among the 2q kept entries, the positives are averaged to mu_plus and the
    negatives to mu_minus (an empty side averages to 0). If mu_plus exceeds
    |mu_minus| the kept positives are set to mu_plus and everything else is
    zeroed; otherwise the kept negatives are set to mu_minus.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.size
    if q < 1 or 2 * q > n:
        raise ValueError(f"need 1 <= q and 2q <= dim, got q={q}, dim={n}")
    order = np.argsort(u, kind="stable")
    kept = np.concatenate([order[:q], order[n - q:]])
    kept_vals = u[kept]
    pos = kept[kept_vals > 0.0]
    neg = kept[kept_vals < 0.0]
    mu_plus = float(u[pos].mean()) if pos.size else 0.0
    mu_minus = float(u[neg].mean()) if neg.size else 0.0
    out = np.zeros_like(u)
    if mu_plus > abs(mu_minus):
        out[pos] = mu_plus
    else:
        out[neg] = mu_minus
    return out


def top_k_sparsify(u: np.ndarray, q: int) -> np.ndarray:
    """Zero all entries except the q of largest magnitude (values preserved)."""
    u = np.asarray(u, dtype=np.float64)
    if q < 0 or q > u.size:
        raise ValueError(f"need 0 <= q <= dim, got q={q}, dim={u.size}")
    out = np.zeros_like(u)
    if q == 0:
        return out
    idx = top_k_indices(u, q)
    out[idx] = u[idx]
    return out


def top_k_indices(u: np.ndarray, q: int) -> np.ndarray:
    """Indices of the q largest-magnitude entries, ties broken by position."""
    # Stable sort on -|u| makes the selection deterministic under ties.
    return np.argsort(-np.abs(u), kind="stable")[:q]


def quantize_uniform(values: np.ndarray, bits: int):
    """Mid-tread uniform quantization of values onto 2^bits levels.

    The levels span [min(values), max(values)]; the range is returned as
    (codes, lo, hi) and is assumed conveyed to the decoder out of band.
    A degenerate range (all values equal) quantizes exactly with code 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if bits < 1:
        raise ValueError("need at least one bit per value")
    if values.size == 0:
        raise ValueError("nothing to quantize")
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64), lo, hi
    levels = 2 ** bits - 1
    step = (hi - lo) / levels
    codes = np.clip(np.rint((values - lo) / step), 0, levels).astype(np.int64)
    return codes, lo, hi


def dequantize_uniform(codes: np.ndarray, bits: int, lo: float, hi: float) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if hi == lo:
        return np.full(codes.shape, lo, dtype=np.float64)
    step = (hi - lo) / (2 ** bits - 1)
    return lo + codes.astype(np.float64) * step


@dataclass(frozen=True)
class ErrorAccumulator:
    """Residual of everything a sender has not yet managed to transmit."""

    residual: np.ndarray

    def __post_init__(self):
        residual = np.asarray(self.residual, dtype=np.float64)
        if not np.all(np.isfinite(residual)):
            raise ValueError("accumulator residual must be finite")
        object.__setattr__(self, "residual", residual)

    @classmethod
    def zeros(cls, dim: int) -> "ErrorAccumulator":
        return cls(residual=np.zeros(dim, dtype=np.float64))


def accumulate_error(acc: ErrorAccumulator, update: np.ndarray,
                     sent: np.ndarray) -> ErrorAccumulator:
    """residual <- residual + update - sent (error feedback across rounds)."""
    update = np.asarray(update, dtype=np.float64)
    sent = np.asarray(sent, dtype=np.float64)
    if update.shape != acc.residual.shape or sent.shape != acc.residual.shape:
        raise ValueError("accumulator, update, and sent vector must share shape")
    return ErrorAccumulator(residual=acc.residual + update - sent)


def log2_binomial(n: int, k: int) -> float:
    """log2 of C(n, k), stable for n up to 1e7 via log-gamma sums."""
    if k < 0 or k > n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    if k == 0 or k == n:
        return 0.0
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)) / LN2


def max_sparsity_within_budget(budget: float, cost, q_max: int) -> int:
    """Largest q in [1, q_max] with cost(q) <= budget, or 0 if none fits.

    cost must be non-decreasing in q; the search is a bisection over the
    feasibility boundary, checked exactly at the returned point.
    """
    if q_max < 1:
        return 0
    if cost(1) > budget:
        return 0
    if cost(q_max) <= budget:
        return q_max
    lo, hi = 1, q_max  # cost(lo) <= budget < cost(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class SparsePayload:
    """Index set plus quantized values, with its exact bit bill.

    Two shapes are used. Weight-update payloads carry a flat support and one
    shared magnitude (values has shape (1,)). Logit-table payloads carry one
    row of indices and values per label (shape (L, q)), with per-row
    quantizer ranges. bit_count is the producing pipeline's accounting
    formula evaluated exactly; it is real-valued because index costs are
    information-theoretic (log2 of a binomial).
    """

    length: int
    indices: np.ndarray
    values: np.ndarray
    quantizer_meta: tuple
    bit_count: float

    @classmethod
    def empty(cls, length: int) -> "SparsePayload":
        return cls(length=length, indices=np.zeros(0, dtype=np.int64),
                   values=np.zeros(0), quantizer_meta=(0, 0.0, 0.0),
                   bit_count=0.0)

    @property
    def is_empty(self) -> bool:
        return self.indices.size == 0
