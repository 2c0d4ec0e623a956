"""IOB2 label encoding and decoding.

Labels are plain strings: ``"O"``, ``"B-<type>"``, ``"I-<type>"``. The label
vocabulary for a type set E is ordered ``[O, B-t1, I-t1, B-t2, I-t2, ...]``
with ``O`` always at index 0.

``decode_iob2`` accepts *any* label string, including invalid ones, and
repairs them with one rule: an ``I-t`` that does not continue a span of type
``t`` (because it follows ``O``, the sequence start, or a span of a different
type) opens a new span as if it were ``B-t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

O_LABEL = "O"


@dataclass(frozen=True)
class EntitySpan:
    """A typed mention covering tokens ``start..end`` inclusive."""

    start: int
    end: int
    type: str
    score: float = field(default=1.0, compare=False)

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} > end {self.end}")
        if self.type == O_LABEL:
            raise ValueError("entity spans cannot have type 'O'")

    def key(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.type)

    def boundary(self) -> tuple[int, int]:
        return (self.start, self.end)


def iob2_labels(types: list[str] | tuple[str, ...]) -> list[str]:
    """Label vocabulary for an ordered entity type set (O excluded from E)."""
    if not types:
        raise ConfigError("entity type set must be non-empty")
    if O_LABEL in types:
        raise ConfigError("'O' is not an entity type")
    if len(set(types)) != len(types):
        raise ConfigError("duplicate entity type names")
    labels = [O_LABEL]
    for t in types:
        labels.append(f"B-{t}")
        labels.append(f"I-{t}")
    return labels


def label_class(label: str) -> str | None:
    """Entity type carried by a label, or None for ``O``."""
    if label == O_LABEL:
        return None
    if label.startswith("B-") or label.startswith("I-"):
        return label[2:]
    raise ValueError(f"not an IOB2 label: {label!r}")


def decode_iob2(labels: list[str]) -> list[EntitySpan]:
    """Decode a label sequence into spans, repairing invalid I- transitions."""
    spans: list[EntitySpan] = []
    start = None
    cur_type = None
    for i, label in enumerate(labels):
        cls = label_class(label)
        if cls is None:
            if start is not None:
                spans.append(EntitySpan(start, i - 1, cur_type))
                start, cur_type = None, None
        elif label.startswith("B-") or cls != cur_type:
            # B- always opens; a mismatched I- opens too (repair rule).
            if start is not None:
                spans.append(EntitySpan(start, i - 1, cur_type))
            start, cur_type = i, cls
    if start is not None:
        spans.append(EntitySpan(start, len(labels) - 1, cur_type))
    return spans


def encode_iob2(spans: list[EntitySpan], length: int) -> list[str]:
    """Encode disjoint spans into an IOB2 label sequence of ``length``."""
    labels = [O_LABEL] * length
    occupied = [False] * length
    for span in spans:
        if span.start < 0 or span.end >= length:
            raise ValueError(f"span {span.boundary()} out of range for length {length}")
        if any(occupied[span.start : span.end + 1]):
            raise ValueError(f"overlapping spans at {span.boundary()}")
        for i in range(span.start, span.end + 1):
            occupied[i] = True
        labels[span.start] = f"B-{span.type}"
        for i in range(span.start + 1, span.end + 1):
            labels[i] = f"I-{span.type}"
    return labels


def is_decoded_valid(labels: list[str]) -> bool:
    """True if the sequence round-trips without triggering the repair rule."""
    return encode_iob2(decode_iob2(labels), len(labels)) == list(labels)
