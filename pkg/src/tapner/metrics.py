"""Exact-match span metrics (micro-averaged precision/recall/F1).

Conventions when a side is empty: precision is 1 with no predictions,
recall is 1 with no gold spans. F1 is 0 when P + R = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

from .iob2 import EntitySpan


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @staticmethod
    def from_counts(tp: int, fp: int, fn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp > 0 else 1.0
        r = tp / (tp + fn) if tp + fn > 0 else 1.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return PRF(p, r, f1, tp, fp, fn)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def _match_counts(gold_keys: list, pred_keys: list) -> tuple[int, int, int]:
    """Multiset exact matching of span keys within one document."""
    gold = list(gold_keys)
    tp = 0
    for k in pred_keys:
        if k in gold:
            gold.remove(k)
            tp += 1
    fp = len(pred_keys) - tp
    fn = len(gold)
    return tp, fp, fn


def micro_prf(gold: list[list[EntitySpan]], pred: list[list[EntitySpan]]) -> PRF:
    """Micro-averaged PRF with exact (start, end, type) matching."""
    if len(gold) != len(pred):
        raise ValueError(f"document count mismatch: {len(gold)} gold vs {len(pred)} pred")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        t, f_, n = _match_counts([s.key() for s in g], [s.key() for s in p])
        tp, fp, fn = tp + t, fp + f_, fn + n
    return PRF.from_counts(tp, fp, fn)


def mention_detection_prf(
    gold: list[list[EntitySpan]], pred: list[list[EntitySpan]]
) -> PRF:
    """Type-blind micro PRF: spans match on (start, end) alone."""
    if len(gold) != len(pred):
        raise ValueError(f"document count mismatch: {len(gold)} gold vs {len(pred)} pred")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        t, f_, n = _match_counts([s.boundary() for s in g], [s.boundary() for s in p])
        tp, fp, fn = tp + t, fp + f_, fn + n
    return PRF.from_counts(tp, fp, fn)


def entity_typing_prf(gold_spans: list[EntitySpan], preds) -> PRF:
    """Typing quality given correct spans, from each span's last token.

    For every gold span the predicted type is the argmax label class at the
    span's last token. An O argmax counts as a miss (fn) without a false
    positive; a wrong entity type counts as both fp and fn.
    """
    tp = fp = fn = 0
    for span in gold_spans:
        if span.end >= len(preds):
            raise ValueError(f"span {span.boundary()} out of range for {len(preds)} tokens")
        cls = preds[span.end].top_class
        if cls == span.type:
            tp += 1
        elif cls is None:
            fn += 1
        else:
            fp += 1
            fn += 1
    return PRF.from_counts(tp, fp, fn)
