"""Hallucination and trace-statistics metrics.

Caption-level scoring takes explicit mention multisets and ground-truth
sets (no synonym lists or parsing; on synthetic vocabularies a mention is
an exact token match). The composite formulas operate on already-computed
component scores. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "CaptionRecord",
    "ConfusionCounts",
    "ChairResult",
    "PopeResult",
    "JsdStats",
    "chair_scores",
    "pope_scores",
    "amber_composite",
    "capture_score",
    "jsd_stats",
    "overlap_ratio",
]

HIST_LOW = -12.0
HIST_HIGH = 1.0
HIST_BINS = 52


@dataclass(frozen=True)
class CaptionRecord:
    """One scored caption: object mentions (multiset) vs ground truth."""

    image_id: str
    mentions: tuple            # object tokens as generated, repeats kept
    truth: frozenset           # annotated object set

    @staticmethod
    def make(image_id: str, mentions: Iterable, truth: Iterable) -> "CaptionRecord":
        return CaptionRecord(image_id=image_id, mentions=tuple(mentions),
                             truth=frozenset(truth))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ChairResult:
    chair_s: float     # captions with at least one hallucinated mention
    chair_i: float     # hallucinated share of all object mentions
    recall: float      # covered share of ground-truth objects, per caption
    no_mentions: bool  # chair_i was undefined and reported as 0


def chair_scores(records: Sequence[CaptionRecord]) -> ChairResult:
    """Hallucination rates over a caption set.

    A mention is hallucinated iff its object is not in the caption's
    ground-truth set. With zero object mentions overall, the mention-level
    rate is undefined and reported as 0 with ``no_mentions`` set.
    """
    if not records:
        raise ValueError("chair_scores needs at least one caption")
    total_mentions = 0
    hallucinated_mentions = 0
    hallucinated_captions = 0
    recalls = []
    for rec in records:
        bad = sum(1 for m in rec.mentions if m not in rec.truth)
        total_mentions += len(rec.mentions)
        hallucinated_mentions += bad
        if bad:
            hallucinated_captions += 1
        if rec.truth:
            recalls.append(len(set(rec.mentions) & rec.truth) / len(rec.truth))
    chair_s = hallucinated_captions / len(records)
    no_mentions = total_mentions == 0
    chair_i = 0.0 if no_mentions else hallucinated_mentions / total_mentions
    recall = sum(recalls) / len(recalls) if recalls else 0.0
    return ChairResult(chair_s=chair_s, chair_i=chair_i, recall=recall,
                       no_mentions=no_mentions)


@dataclass(frozen=True)
class PopeResult:
    accuracy: float
    precision: float
    recall: float
    f1: float


def pope_scores(c: ConfusionCounts) -> PopeResult:
    """Standard binary-classification scores; 0-denominators score 0."""
    if c.total <= 0:
        raise ValueError("empty confusion table")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return PopeResult(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def amber_composite(chair_pct: float, f1_pct: float) -> float:
    """Blend of generative and discriminative quality on the 0-100 scale."""
    if not (0.0 <= chair_pct <= 100.0 and 0.0 <= f1_pct <= 100.0):
        raise ValueError("inputs must be on the 0-100 scale")
    return (100.0 - chair_pct + f1_pct) / 2.0


def capture_score(f1_obj: float, f1_attr: float, f1_rel: float) -> float:
    """Weighted F1 aggregation over objects, attributes, relations (5:5:2)."""
    for value in (f1_obj, f1_attr, f1_rel):
        if not 0.0 <= value <= 1.0:
            raise ValueError("component F1 scores must lie in [0, 1]")
    return (5.0 * f1_obj + 5.0 * f1_attr + 2.0 * f1_rel) / 12.0


@dataclass(frozen=True)
class JsdStats:
    """Histogram of log10(jsd) over decoding steps plus the gate fraction."""

    bin_edges: tuple        # HIST_BINS + 1 edges over [-12, 1]
    counts: tuple           # per-bin step counts
    underflow: int          # exact zeros and log10 below the range
    overflow: int
    fraction_below: float   # steps with log10(jsd) <= gamma (zeros count)
    total: int

    def rows(self):
        """(bin_low, bin_high, count) rows; underflow first."""
        yield (-math.inf, HIST_LOW, self.underflow)
        for i, count in enumerate(self.counts):
            yield (self.bin_edges[i], self.bin_edges[i + 1], count)
        if self.overflow:
            yield (HIST_HIGH, math.inf, self.overflow)


def jsd_stats(jsd_values: Sequence, gamma: float) -> JsdStats:
    """Fixed-width histogram of log10(jsd) with a dedicated zero bucket.

    Accepts raw divergences (nats) or per-step trace records carrying a
    ``jsd`` attribute; exact zeros land in the underflow bucket rather
    than producing log-of-zero.
    """
    if len(jsd_values) == 0:
        raise ValueError("jsd_stats needs at least one step")
    jsd_values = [_step_jsd(v) for v in jsd_values]
    width = (HIST_HIGH - HIST_LOW) / HIST_BINS
    edges = tuple(HIST_LOW + i * width for i in range(HIST_BINS + 1))
    counts = [0] * HIST_BINS
    underflow = overflow = 0
    below = 0
    for value in jsd_values:
        log10 = math.log10(value) if value > 0.0 else -math.inf
        if log10 <= gamma:
            below += 1
        if log10 < HIST_LOW:
            underflow += 1
        elif log10 >= HIST_HIGH:
            overflow += 1
        else:
            counts[min(int((log10 - HIST_LOW) / width), HIST_BINS - 1)] += 1
    return JsdStats(bin_edges=edges, counts=tuple(counts), underflow=underflow,
                    overflow=overflow, fraction_below=below / len(jsd_values),
                    total=len(jsd_values))


def _step_jsd(value) -> float:
    """Raw divergence from a float, a DivergenceValue, or a StepTrace."""
    inner = getattr(value, "jsd", value)
    return float(getattr(inner, "jsd", inner))


def overlap_ratio(words_a: set, words_b: set) -> float:
    """|A intersect B| / |A|; undefined (error) for empty A."""
    if not words_a:
        raise ValueError("overlap_ratio undefined for an empty reference set")
    return len(words_a & words_b) / len(words_a)
