"""Float64 vector/matrix helpers, masked softmax, seeded RNG, gradient checking.

All public operations work on 64-bit floats and are deterministic: the same
inputs produce bit-identical outputs. ``-inf`` is an admissible logit value
and denotes an exactly-masked entry; ``+inf`` and NaN are rejected.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise NumericError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise NumericError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with left-to-right accumulation per row.

    Reference semantics for the small carriers used in tests and table
    assembly checks; hot paths use BLAS-backed ``@`` directly, which is
    equally deterministic within a process but may round differently.
    """
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise NumericError(f"shape mismatch: {m.shape} @ {v.shape}")
    out = np.empty(m.shape[0], dtype=np.float64)
    for i in range(m.shape[0]):
        acc = 0.0
        row = m[i]
        for j in range(v.shape[0]):
            acc += float(row[j]) * float(v[j])
        out[i] = acc
    if np.isinf(out).any() or np.isnan(out).any():
        raise NumericError("matvec overflowed to non-finite values")
    return out


def _check_logits(logits: np.ndarray) -> np.ndarray:
    if np.isnan(logits).any():
        raise NumericError("NaN logit")
    if (logits == np.inf).any():
        raise NumericError("+inf logit")
    finite = logits != -np.inf
    if not finite.any():
        raise NumericError("all logits are -inf")
    return finite

def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax; ``-inf`` entries map to exactly 0.

    The normalizer is accumulated over the finite entries only, so appending
    masked rows to a logit vector leaves the distribution over the original
    entries bit-identical (the masked-extension identity the vocabulary
    expansion tests rely on).
    """
    logits = as_vector(logits)
    finite = _check_logits(logits)
    shifted = logits[finite] - logits[finite].max()
    exps = np.exp(shifted)
    out = np.zeros_like(logits)
    out[finite] = exps / exps.sum()
    return out


def log_softmax(logits) -> np.ndarray:
    """Log of :func:`softmax`, with masked entries staying exactly ``-inf``."""
    logits = as_vector(logits)
    finite = _check_logits(logits)
    shifted = logits[finite] - logits[finite].max()
    logz = math.log(np.exp(shifted).sum())
    out = np.full_like(logits, -np.inf)
    out[finite] = shifted - logz
    return out


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise :func:`log_softmax` for a (batch, V) logit matrix.

    All-finite matrices take a vectorized path; rows with ``-inf`` entries
    fall back to per-row computation whose normalizer sums only the finite
    entries, compacted in order. The two paths agree bit-for-bit on the
    shared entries, so a row extended by masked columns keeps its original
    log-probabilities exactly.
    """
    logits = as_matrix(logits)
    if np.isfinite(logits).all():
        m = logits.max(axis=1, keepdims=True)
        shifted = logits - m
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = np.empty_like(logits)
    for i in range(logits.shape[0]):
        out[i] = log_softmax(logits[i])
    return out


class SeededRng:
    """Deterministic random source: PCG64 behind numpy's ``Generator``.

    The output stream for a given seed is fixed by the PCG64 algorithm and
    numpy's stable bit-generator contract, so identical seeds reproduce
    identical sequences across runs and platforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "SeededRng":
        """Derive an independent, reproducible substream keyed by integers."""
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in keys]])
        return SeededRng(int(ss.generate_state(1, np.uint64)[0]))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq: Sequence, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def random(self) -> float:
        return float(self._gen.random())


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate. Raises if any
    evaluation of ``f`` is non-finite.
    """
    if h <= 0:
        raise NumericError("step size h must be positive")
    x = as_vector(x).copy()
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise; used by gradient audits."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
