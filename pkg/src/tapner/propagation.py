"""Label propagation: fusing tokenwise type predictions with span evidence.

Four strategies turn per-token IOB2 distributions plus adjacency/span scores
into span-level entities:

* ``tokenwise``: decode the argmax labels directly (baseline).
* ``adjacency``: copy a token's type leftward across adjacent pairs the
  adjacency detector accepts (merging the pair into one mention), keeping
  the original B/I boundaries where nothing fires.
* ``spanwise_typing``: every overlap-resolved detected span becomes an
  entity, typed by its last token's argmax class (runner-up class if the
  argmax is O, so a type is always assigned).
* ``spanwise_propagation``: walking end positions right to left, a non-O
  token that has at least one detected span ending on it emits an entity
  over the highest-scoring such span; consumed positions are skipped, and
  non-O tokens without a span are dropped (both detectors must agree).

Propagation operates on type *classes*; B/I tags are re-derived positionally
when runs are decoded, so outputs are always valid span sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .iob2 import O_LABEL, EntitySpan, decode_iob2, label_class
from .spans import AdjacencyScore, SpanScore

STRATEGY_TOKENWISE = "tokenwise"
STRATEGY_ADJACENCY = "adjacency"
STRATEGY_SPANWISE_TYPING = "spanwise_typing"
STRATEGY_SPANWISE_PROPAGATION = "spanwise_propagation"
STRATEGIES = (
    STRATEGY_TOKENWISE,
    STRATEGY_ADJACENCY,
    STRATEGY_SPANWISE_TYPING,
    STRATEGY_SPANWISE_PROPAGATION,
)


@dataclass(frozen=True)
class TokenwisePrediction:
    """Full class distribution over IOB2 labels for one token."""

    labels: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (len(self.labels),):
            raise ValueError("distribution size does not match label set")
        if np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def top_label(self) -> str:
        return self.labels[int(np.argmax(self.probs))]

    @property
    def runner_up_label(self) -> str:
        order = np.argsort(-self.probs, kind="stable")
        return self.labels[int(order[1])]

    @property
    def top_class(self) -> str | None:
        return label_class(self.top_label)

    def top_prob(self) -> float:
        return float(np.max(self.probs))


def tokenwise_only(preds: list[TokenwisePrediction]) -> list[EntitySpan]:
    """Decode argmax labels directly (with the IOB2 repair rule)."""
    spans = decode_iob2([p.top_label for p in preds])
    out = []
    for s in spans:
        score = float(np.mean([preds[t].top_prob() for t in range(s.start, s.end + 1)]))
        out.append(EntitySpan(s.start, s.end, s.type, score=score))
    return out


def propagate_adjacency(
    preds: list[TokenwisePrediction],
    adjacency: list[AdjacencyScore],
    threshold: float = 0.5,
) -> list[EntitySpan]:
    """Copy types leftward over accepted adjacent pairs, then decode.

    A fired pair merges its two tokens into one mention. Where no pair
    fires, the original B/I structure decides continuation, so with all
    scores below threshold this reduces exactly to ``tokenwise_only``.
    """
    n = len(preds)
    labels = [p.top_label for p in preds]
    classes: list[str | None] = [p.top_class for p in preds]
    score_at = {a.right: a.score for a in adjacency}
    linked = [False] * n
    for i in range(n - 1, 0, -1):
        if classes[i] is not None and score_at.get(i, 0.0) > threshold:
            classes[i - 1] = classes[i]
            linked[i] = True

    def continues(i: int) -> bool:
        if i == 0 or classes[i - 1] != classes[i]:
            return False
        return linked[i] or labels[i] == f"I-{classes[i]}"

    spans = []
    i = 0
    while i < n:
        if classes[i] is None:
            i += 1
            continue
        j = i
        while j + 1 < n and continues(j + 1):
            j += 1
        score = float(np.mean([preds[t].top_prob() for t in range(i, j + 1)]))
        spans.append(EntitySpan(i, j, classes[i], score=score))
        i = j + 1
    return spans


def _span_type(pred: TokenwisePrediction) -> str:
    """Type for a detected span from its last token; never O."""
    label = pred.top_label
    if label == O_LABEL:
        label = pred.runner_up_label
    return label_class(label)


def spanwise_typing(
    spans: list[SpanScore], preds: list[TokenwisePrediction]
) -> list[EntitySpan]:
    """Type every overlap-resolved span by its last token's prediction."""
    out = [
        EntitySpan(s.start, s.end, _span_type(preds[s.end]), score=s.score)
        for s in spans
    ]
    out.sort(key=lambda e: e.start)
    return out


def spanwise_propagation(
    preds: list[TokenwisePrediction], spans: list[SpanScore]
) -> list[EntitySpan]:
    """Emit the best detected span ending at each typed token, right to left.

    Span selection at an end position takes the highest score; ties go to the
    longer span (smaller start). Positions covered by an emitted span are
    consumed; typed tokens with no accepted span ending on them are dropped.
    """
    n = len(preds)
    by_end: dict[int, list[SpanScore]] = {}
    for s in spans:
        by_end.setdefault(s.end, []).append(s)
    consumed = [False] * n
    out: list[EntitySpan] = []
    for i in range(n - 1, -1, -1):
        if consumed[i]:
            continue
        cls = preds[i].top_class
        if cls is None:
            continue
        cands = by_end.get(i)
        if not cands:
            continue
        best = min(cands, key=lambda s: (-s.score, s.start))
        out.append(EntitySpan(best.start, i, cls, score=best.score))
        for t in range(best.start, i + 1):
            consumed[t] = True
    out.sort(key=lambda e: e.start)
    return out


def apply_strategy(
    strategy: str,
    preds: list[TokenwisePrediction],
    adjacency: list[AdjacencyScore],
    accepted_spans: list[SpanScore],
    adjacency_threshold: float = 0.5,
) -> list[EntitySpan]:
    """Run one named propagation strategy over shared probe outputs."""
    from .spans import resolve_overlaps

    if strategy == STRATEGY_TOKENWISE:
        return tokenwise_only(preds)
    if strategy == STRATEGY_ADJACENCY:
        return propagate_adjacency(preds, adjacency, threshold=adjacency_threshold)
    if strategy == STRATEGY_SPANWISE_TYPING:
        return spanwise_typing(resolve_overlaps(accepted_spans), preds)
    if strategy == STRATEGY_SPANWISE_PROPAGATION:
        return spanwise_propagation(preds, accepted_spans)
    raise ValueError(f"unknown strategy {strategy!r}")
