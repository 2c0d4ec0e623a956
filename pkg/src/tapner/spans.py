"""Attention-based span and adjacency detection.

Two detector families over attention features:

* adjacency: classifies whether two *adjacent* tokens belong to the same
  mention, from the attention weights between them.
* span: scores a candidate ``(start, end)`` pair from the attention weights
  between a probe position ``k`` and the candidate start. ``span_last`` reads
  the feature at ``k = end``; ``span_next`` reads it one token later
  (``k = end + 1``), i.e. a span is only decidable once the following token
  exists.

Candidate enumeration is windowed: starts further than ``window`` tokens from
the end are skipped, with the exception of position 0, which is kept
regardless of distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPAN_NEXT = "span_next"
SPAN_LAST = "span_last"
SPAN_VARIANTS = (SPAN_NEXT, SPAN_LAST)

DEFAULT_WINDOW = 16
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class SpanScore:
    """Scored candidate span over tokens ``start..end`` inclusive."""

    start: int
    end: int
    score: float

    def __post_init__(self):
        if self.start > self.end or self.start < 0:
            raise ValueError(f"bad span candidate ({self.start}, {self.end})")
        if not np.isfinite(self.score):
            raise ValueError("span score must be finite")

    def length(self) -> int:
        return self.end - self.start + 1

    def overlaps(self, other: "SpanScore") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class AdjacencyScore:
    """Same-mention score for the adjacent pair ``(left, left + 1)``."""

    left: int
    score: float

    def __post_init__(self):
        if self.left < 0:
            raise ValueError("left index must be >= 0")

    @property
    def right(self) -> int:
        return self.left + 1


def candidate_starts(end: int, window: int) -> list[int]:
    """Start positions considered for a span ending at ``end``."""
    starts = list(range(max(0, end - window), end + 1))
    if starts[0] != 0:
        starts.insert(0, 0)
    return starts


def detect_adjacent(probe, bundle, j: int) -> AdjacencyScore:
    """Score whether tokens ``j-1`` and ``j`` belong to the same mention."""
    if j < 1:
        raise ValueError("adjacency needs a preceding token (j >= 1)")
    feat = bundle.attn_feature(j, j - 1)
    prob = probe.predict_proba(feat[None, :])[0, 1]
    return AdjacencyScore(left=j - 1, score=float(prob))


def detect_spans_at(
    probe,
    bundle,
    k: int,
    variant: str = SPAN_NEXT,
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
) -> list[SpanScore]:
    """Candidate spans ending at the newest decidable position, given token k.

    For ``span_next`` the decidable end is ``k - 1`` (empty at ``k = 0``);
    for ``span_last`` it is ``k`` itself. Returns candidates scoring at least
    ``threshold``, sorted by descending score.
    """
    if variant not in SPAN_VARIANTS:
        raise ValueError(f"unknown span variant {variant!r}")
    if k >= bundle.seq_len:
        raise ValueError(f"position {k} out of range for length {bundle.seq_len}")
    end = k - 1 if variant == SPAN_NEXT else k
    if end < 0:
        return []
    starts = candidate_starts(end, window)
    feats = np.stack([bundle.attn_feature(k, i) for i in starts])
    probs = probe.predict_proba(feats)[:, 1]
    out = [
        SpanScore(start=i, end=end, score=float(p))
        for i, p in zip(starts, probs)
        if p >= threshold
    ]
    out.sort(key=lambda s: (-s.score, -s.length(), s.start))
    return out


def resolve_overlaps(candidates: list[SpanScore]) -> list[SpanScore]:
    """Greedy selection of non-overlapping spans by descending score.

    Ties are broken in favour of the longer span, then the smaller start.
    The result is sorted by start position.
    """
    ranked = sorted(candidates, key=lambda s: (-s.score, -s.length(), s.start))
    kept: list[SpanScore] = []
    for cand in ranked:
        if all(not cand.overlaps(k) for k in kept):
            kept.append(cand)
    kept.sort(key=lambda s: s.start)
    return kept
