"""Probability and divergence kernels over dense vocabulary-sized vectors.

All kernels are pure functions of their arguments, accumulate in float64,
and avoid epsilon smoothing: zero handling relies on the 0*log(0) = 0
convention and on the mixture term of the Jensen-Shannon divergence, so the
exact corner values (0 for identical inputs, ln 2 for disjoint support)
come out bit-clean.

Masking is explicit: a boolean array marks excluded vocabulary entries
instead of writing sentinel values into the scores, so NaN/inf never
propagate through arithmetic.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptySupport, ZeroNormError

LN2 = math.log(2.0)

__all__ = [
    "LN2",
    "LogitVector",
    "Distribution",
    "DivergenceValue",
    "softmax",
    "kl_divergence",
    "js_divergence",
    "distance_suite",
    "adaptive_plausibility_mask",
]


@dataclass
class LogitVector:
    """Unnormalized per-token scores, with an optional exclusion mask.

    ``mask[i] = True`` means entry i is excluded from consideration
    (softmax assigns it probability zero, fusion keeps it excluded).
    Unmasked entries must be finite.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise DimensionError("logit vector must be 1-D and non-empty")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise DimensionError("mask length differs from values length")
        active = self.values if self.mask is None else self.values[~self.mask]
        if not np.isfinite(active).all():
            raise ValueError("unmasked logit entries must be finite")

    @property
    def vocab_size(self) -> int:
        return int(self.values.size)

    def unmasked_indices(self) -> np.ndarray:
        if self.mask is None:
            return np.arange(self.vocab_size)
        return np.flatnonzero(~self.mask)

    def digest(self) -> str:
        """Short stable digest of the raw values (for traces)."""
        h = hashlib.sha256(self.values.tobytes())
        if self.mask is not None:
            h.update(self.mask.tobytes())
        return h.hexdigest()[:16]


@dataclass
class Distribution:
    """A normalized probability vector over the vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise DimensionError("distribution must be 1-D and non-empty")
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total!r}, not 1")

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class DivergenceValue:
    """A Jensen-Shannon divergence in nats plus its log10.

    ``log10_jsd`` is -inf when the divergence is exactly zero; the gating
    threshold is compared on this log10 scale.
    """

    jsd: float
    log10_jsd: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.jsd < 0.0 or self.jsd > LN2 + 1e-12:
            raise ValueError(f"divergence {self.jsd!r} outside [0, ln 2]")
        if self.log10_jsd is None:
            log10 = math.log10(self.jsd) if self.jsd > 0.0 else -math.inf
            object.__setattr__(self, "log10_jsd", log10)


def softmax(logits: LogitVector) -> Distribution:
    """Max-shifted softmax; masked entries map to probability zero."""
    values = logits.values
    if logits.mask is None:
        shifted = values - values.max()
        exps = np.exp(shifted)
    else:
        keep = ~logits.mask
        if not keep.any():
            raise EmptySupport("softmax of a fully masked vector")
        exps = np.zeros_like(values)
        shifted = values[keep] - values[keep].max()
        exps[keep] = np.exp(shifted)
    return Distribution(exps / exps.sum())


def _check_same_size(p_size: int, q_size: int) -> None:
    if p_size != q_size:
        raise DimensionError(f"vocab sizes differ: {p_size} vs {q_size}")


def kl_divergence(p: Distribution, q: Distribution) -> float:
    """KL(P||Q) in nats, with 0*log(0/q) = 0; +inf on support violation."""
    _check_same_size(p.vocab_size, q.vocab_size)
    pv, qv = p.probs, q.probs
    support = pv > 0.0
    if np.any(support & (qv == 0.0)):
        return math.inf
    ps = pv[support]
    terms = ps * np.log(ps / qv[support])
    return float(terms.sum())


def js_divergence(p: Distribution, q: Distribution) -> DivergenceValue:
    """Jensen-Shannon divergence (nats): half-sum of KLs to the mixture.

    Finite for every valid pair (the mixture is zero only where both
    inputs are), symmetric, zero iff the inputs are entrywise equal, and
    at most ln 2. Tiny negative rounding residue is clamped to zero.
    """
    _check_same_size(p.vocab_size, q.vocab_size)
    pv, qv = p.probs, q.probs
    m = 0.5 * (pv + qv)
    ps = pv > 0.0
    qs = qv > 0.0
    left = float((pv[ps] * np.log(pv[ps] / m[ps])).sum())
    right = float((qv[qs] * np.log(qv[qs] / m[qs])).sum())
    jsd = 0.5 * (left + right)
    if jsd < 0.0:  # rounding residue; true JSD is nonnegative
        jsd = 0.0
    elif jsd > LN2:
        jsd = LN2
    return DivergenceValue(jsd=jsd)


def distance_suite(a: LogitVector, b: LogitVector) -> dict[str, float]:
    """Cosine distance, Euclidean distance, and total variation.

    Cosine/Euclidean act on the raw logit vectors; total variation is
    computed between their softmaxes. Inputs must be unmasked.
    """
    if a.mask is not None or b.mask is not None:
        raise ValueError("distance_suite requires unmasked vectors")
    _check_same_size(a.vocab_size, b.vocab_size)
    av, bv = a.values, b.values
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine distance undefined for zero-norm vector")
    if np.array_equal(av, bv):
        cosine = 0.0  # avoid rounding residue on bit-identical inputs
    else:
        cosine = min(max(1.0 - float(av @ bv) / (na * nb), 0.0), 2.0)
    euclidean = float(np.linalg.norm(av - bv))
    tv = 0.5 * float(np.abs(softmax(a).probs - softmax(b).probs).sum())
    return {
        "cosine_distance": cosine,
        "euclidean_distance": euclidean,
        "total_variation": min(tv, 1.0),
    }


def adaptive_plausibility_mask(p: Distribution, beta: float) -> np.ndarray:
    """Indices i with p_i >= beta * max(p); always contains the argmax."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta!r}")
    cutoff = beta * float(p.probs.max())
    return np.flatnonzero(p.probs >= cutoff)
