"""Incremental generate-and-annotate engine.

Every token (prompt tokens included) flows through the same path: one
KV-cached decode step, one typing-probe call for the new position, and one
batched span-probe call over the O(window) candidates that end at the newest
decidable position. Model work and probe work per step are therefore
independent of how long the sequence already is.

Label propagation is then recomputed over the full prefix — pure bookkeeping
over already-computed scores, no model or probe calls — and the change to
the entity set is emitted as a diff event (added / retracted / retyped
spans). Folding the events left to right reconstructs the final entity set,
and the final set equals what batch annotation of the final token sequence
produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContextOverflowError
from .iob2 import EntitySpan, iob2_labels
from .model.decoding import DecodeParams, pick_next_token
from .model.tokenizer import Vocab
from .model.transformer import TinyDecoderLM
from .probe import ProbeClassifier, load_probe, save_probe
from .propagation import (
    STRATEGIES,
    STRATEGY_ADJACENCY,
    STRATEGY_SPANWISE_PROPAGATION,
    STRATEGY_SPANWISE_TYPING,
    STRATEGY_TOKENWISE,
    TokenwisePrediction,
    apply_strategy,
)
from .spans import SPAN_VARIANTS, AdjacencyScore, SpanScore, candidate_starts, detect_spans_at
from .validation import check_probability


@dataclass(frozen=True)
class PipelineConfig:
    layer: int
    strategy: str = STRATEGY_SPANWISE_PROPAGATION
    variant: str = "span_next"
    span_threshold: float = 0.5
    adjacency_threshold: float = 0.5
    window: int = 16
    decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.variant not in SPAN_VARIANTS:
            raise ConfigError(f"unknown span variant {self.variant!r}")
        check_probability(self.span_threshold, "span_threshold")
        check_probability(self.adjacency_threshold, "adjacency_threshold")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.layer < 0:
            raise ConfigError("layer must be >= 0")

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "strategy": self.strategy,
            "variant": self.variant,
            "span_threshold": self.span_threshold,
            "adjacency_threshold": self.adjacency_threshold,
            "window": self.window,
            "decode": {
                "max_new_tokens": self.decode.max_new_tokens,
                "repetition_penalty": self.decode.repetition_penalty,
                "strategy": self.decode.strategy,
            },
        }

    @staticmethod
    def from_json(d: dict) -> "PipelineConfig":
        decode = d.get("decode", {})
        return PipelineConfig(
            layer=int(d["layer"]),
            strategy=d.get("strategy", STRATEGY_SPANWISE_PROPAGATION),
            variant=d.get("variant", "span_next"),
            span_threshold=float(d.get("span_threshold", 0.5)),
            adjacency_threshold=float(d.get("adjacency_threshold", 0.5)),
            window=int(d.get("window", 16)),
            decode=DecodeParams(
                max_new_tokens=int(decode.get("max_new_tokens", 32)),
                repetition_penalty=float(decode.get("repetition_penalty", 1.2)),
            ),
        )


@dataclass
class ProbeSet:
    """Trained probes plus the label vocabulary they predict over."""

    entity_types: list[str]
    typing: dict[int, ProbeClassifier]
    span: ProbeClassifier | None = None
    adjacency: ProbeClassifier | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(iob2_labels(self.entity_types))

    def typing_at(self, layer: int) -> ProbeClassifier:
        if layer not in self.typing:
            raise ConfigError(
                f"no typing probe for tap {layer}; available: {sorted(self.typing)}"
            )
        return self.typing[layer]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        common = {"entity_types": self.entity_types}
        for layer, probe in self.typing.items():
            save_probe(probe, directory / f"typing_l{layer}.bin",
                       {**common, "task": "typing", "layer": layer})
        if self.span is not None:
            save_probe(self.span, directory / "span.bin", {**common, "task": "span"})
        if self.adjacency is not None:
            save_probe(self.adjacency, directory / "adjacency.bin",
                       {**common, "task": "adjacency"})

    @staticmethod
    def load(directory: str | Path) -> "ProbeSet":
        directory = Path(directory)
        typing: dict[int, ProbeClassifier] = {}
        entity_types = None
        for path in sorted(directory.glob("typing_l*.bin")):
            probe, meta = load_probe(path)
            typing[int(meta["layer"])] = probe
            entity_types = meta["entity_types"]
        span = adjacency = None
        if (directory / "span.bin").exists():
            span, meta = load_probe(directory / "span.bin")
            entity_types = entity_types or meta["entity_types"]
        if (directory / "adjacency.bin").exists():
            adjacency, meta = load_probe(directory / "adjacency.bin")
            entity_types = entity_types or meta["entity_types"]
        if not typing or entity_types is None:
            raise ConfigError(f"no typing probes found under {directory}")
        return ProbeSet(entity_types=list(entity_types), typing=typing,
                        span=span, adjacency=adjacency)


@dataclass(frozen=True)
class Retype:
    span: EntitySpan
    old_type: str


@dataclass(frozen=True)
class StreamEvent:
    step: int
    token_id: int
    token_text: str
    tokenwise: str
    added: tuple[EntitySpan, ...] = ()
    retracted: tuple[EntitySpan, ...] = ()
    retyped: tuple[Retype, ...] = ()


def _span_json(span: EntitySpan, words: list[str]) -> dict:
    return {
        "start": span.start,
        "end": span.end,
        "type": span.type,
        "score": round(float(span.score), 6),
        "text": " ".join(words[span.start : span.end + 1]),
    }


def event_to_json(event: StreamEvent, words: list[str]) -> dict:
    return {
        "step": event.step,
        "token": {"id": event.token_id, "text": event.token_text},
        "tokenwise": event.tokenwise,
        "added": [_span_json(s, words) for s in event.added],
        "retracted": [_span_json(s, words) for s in event.retracted],
        "retyped": [
            {**_span_json(r.span, words), "old_type": r.old_type}
            for r in event.retyped
        ],
    }


def fold_events(events) -> set[tuple[int, int, str]]:
    """Replay a stream of events into the final (start, end, type) set."""
    current: dict[tuple[int, int], str] = {}
    for ev in events:
        for span in ev.retracted:
            current.pop((span.start, span.end), None)
        for r in ev.retyped:
            current[(r.span.start, r.span.end)] = r.span.type
        for span in ev.added:
            current[(span.start, span.end)] = span.type
    return {(s, e, t) for (s, e), t in current.items()}


def diff_entities(
    old: list[EntitySpan], new: list[EntitySpan]
) -> tuple[tuple[EntitySpan, ...], tuple[EntitySpan, ...], tuple[Retype, ...]]:
    old_by = {e.boundary(): e for e in old}
    new_by = {e.boundary(): e for e in new}
    added = tuple(e for b, e in new_by.items() if b not in old_by)
    retracted = tuple(e for b, e in old_by.items() if b not in new_by)
    retyped = tuple(
        Retype(new_by[b], old_by[b].type)
        for b in new_by
        if b in old_by and new_by[b].type != old_by[b].type
    )
    return added, retracted, retyped


class StreamState:
    """Mutable per-stream record. One stream, one state; never shared."""

    def __init__(self, pipeline: "Pipeline", capacity: int, prompt_len: int,
                 budget: int):
        self.tokens: list[int] = []
        self.cache = pipeline.model.init_cache(capacity)
        self.bundle = pipeline.model.new_bundle(capacity)
        self.preds: list[TokenwisePrediction] = []
        self.adjacency: list[AdjacencyScore] = []
        self.accepted: list[SpanScore] = []
        self.entities: list[EntitySpan] = []
        self.last_logits = None
        self.prompt_len = prompt_len
        self.budget = budget
        self.generated = 0

    @property
    def finished(self) -> bool:
        return self.generated >= self.budget

    @property
    def capacity(self) -> int:
        return self.cache.capacity


@dataclass
class StreamResult:
    tokens: list[int]
    text: str
    entities: list[EntitySpan]
    events: list[StreamEvent]


@dataclass
class Analysis:
    """Batch-mode probe outputs for a full token sequence."""

    preds: list[TokenwisePrediction]
    adjacency: list[AdjacencyScore]
    accepted: list[SpanScore]
    entities: list[EntitySpan]


class Pipeline:
    """A model, its tokenizer, trained probes, and a pipeline configuration."""

    def __init__(self, model: TinyDecoderLM, vocab: Vocab, probes: ProbeSet,
                 cfg: PipelineConfig):
        if cfg.layer >= model.cfg.n_taps:
            raise ConfigError(
                f"layer {cfg.layer} out of range for {model.cfg.n_taps} tap points"
            )
        probes.typing_at(cfg.layer)
        if cfg.strategy in (STRATEGY_SPANWISE_TYPING, STRATEGY_SPANWISE_PROPAGATION) \
                and probes.span is None:
            raise ConfigError(f"strategy {cfg.strategy} needs a span probe")
        if cfg.strategy == STRATEGY_ADJACENCY and probes.adjacency is None:
            raise ConfigError("adjacency strategy needs an adjacency probe")
        self.model = model
        self.vocab = vocab
        self.probes = probes
        self.cfg = cfg

    # -- shared helpers -------------------------------------------------------

    @property
    def labels(self) -> tuple[str, ...]:
        return self.probes.labels

    def with_config(self, cfg: PipelineConfig) -> "Pipeline":
        return Pipeline(self.model, self.vocab, self.probes, cfg)

    def _needs_span(self) -> bool:
        return self.cfg.strategy in (STRATEGY_SPANWISE_TYPING,
                                     STRATEGY_SPANWISE_PROPAGATION)

    def _needs_adjacency(self) -> bool:
        return self.cfg.strategy == STRATEGY_ADJACENCY

    def _typing_pred(self, probs: np.ndarray) -> TokenwisePrediction:
        return TokenwisePrediction(labels=self.labels, probs=probs)

    def _propagate(self, preds, adjacency, accepted) -> list[EntitySpan]:
        return apply_strategy(
            self.cfg.strategy, preds, adjacency, accepted,
            adjacency_threshold=self.cfg.adjacency_threshold,
        )

    # -- incremental path -----------------------------------------------------

    def _ingest(self, state: StreamState, token_id: int) -> StreamEvent:
        logits_row, hidden_col, attn_rows, _ = self.model.decode_step(
            state.cache, token_id
        )
        state.bundle.append(hidden_col, attn_rows, logits_row)
        state.tokens.append(token_id)
        state.last_logits = logits_row
        k = len(state.tokens) - 1

        typing_probe = self.probes.typing_at(self.cfg.layer)
        probs = typing_probe.predict_proba(hidden_col[self.cfg.layer].numpy()[None, :])[0]
        state.preds.append(self._typing_pred(probs))

        if self._needs_adjacency() and k >= 1:
            feat = state.bundle.attn_feature(k, k - 1)
            score = float(self.probes.adjacency.predict_proba(feat[None, :])[0, 1])
            state.adjacency.append(AdjacencyScore(left=k - 1, score=score))

        if self._needs_span():
            state.accepted.extend(detect_spans_at(
                self.probes.span, state.bundle, k,
                variant=self.cfg.variant,
                threshold=self.cfg.span_threshold,
                window=self.cfg.window,
            ))

        new_entities = self._propagate(state.preds, state.adjacency, state.accepted)
        added, retracted, retyped = diff_entities(state.entities, new_entities)
        state.entities = new_entities
        return StreamEvent(
            step=k,
            token_id=token_id,
            token_text=self.vocab.piece(token_id),
            tokenwise=state.preds[k].top_label,
            added=added,
            retracted=retracted,
            retyped=retyped,
        )

    def init_stream(self, prompt: list[int],
                    max_new_tokens: int | None = None) -> tuple[StreamState, list[StreamEvent]]:
        """Feed the prompt through the incremental path, one token at a time."""
        if not prompt:
            raise ValueError("prompt must be non-empty")
        budget = self.cfg.decode.max_new_tokens if max_new_tokens is None else max_new_tokens
        capacity = len(prompt) + budget
        if capacity > self.model.cfg.max_context:
            raise ContextOverflowError(
                f"prompt ({len(prompt)}) + budget ({budget}) exceeds "
                f"context {self.model.cfg.max_context}"
            )
        state = StreamState(self, capacity, prompt_len=len(prompt), budget=budget)
        events = [self._ingest(state, t) for t in prompt]
        return state, events

    def step(self, state: StreamState) -> tuple[StreamState, StreamEvent]:
        """Generate one token and update annotations incrementally."""
        if state.finished:
            raise RuntimeError("stream already finished")
        next_id = pick_next_token(state.last_logits, set(state.tokens), self.cfg.decode)
        event = self._ingest(state, next_id)
        state.generated += 1
        return state, event

    def run_stream(self, prompt: list[int],
                   max_new_tokens: int | None = None) -> StreamResult:
        state, events = self.init_stream(prompt, max_new_tokens)
        while not state.finished:
            state, event = self.step(state)
            events.append(event)
        return StreamResult(
            tokens=list(state.tokens),
            text=self.vocab.decode(state.tokens),
            entities=list(state.entities),
            events=events,
        )

    # -- batch path -----------------------------------------------------------

    def analyze(self, tokens: list[int], strategies: tuple[str, ...] | None = None) -> Analysis:
        """Full forward pass, all probes, propagation once.

        ``strategies`` widens which probe outputs are computed (for the
        evaluation harness); the returned ``entities`` always follow the
        configured strategy.
        """
        if not tokens:
            raise ValueError("empty token sequence")
        wanted = set(strategies or ()) | {self.cfg.strategy}
        bundle = self.model.forward_full(tokens)
        n = bundle.seq_len
        typing_probe = self.probes.typing_at(self.cfg.layer)
        hidden = bundle.hidden[self.cfg.layer].numpy()
        all_probs = typing_probe.predict_proba(hidden)
        preds = [self._typing_pred(all_probs[i]) for i in range(n)]

        adjacency: list[AdjacencyScore] = []
        if STRATEGY_ADJACENCY in wanted and self.probes.adjacency is not None and n > 1:
            feats = np.stack([bundle.attn_feature(j, j - 1) for j in range(1, n)])
            scores = self.probes.adjacency.predict_proba(feats)[:, 1]
            adjacency = [AdjacencyScore(left=j - 1, score=float(s))
                         for j, s in zip(range(1, n), scores)]

        accepted: list[SpanScore] = []
        span_wanted = wanted & {STRATEGY_SPANWISE_TYPING, STRATEGY_SPANWISE_PROPAGATION}
        if span_wanted and self.probes.span is not None:
            pairs = []
            for k in range(n):
                end = k - 1 if self.cfg.variant == "span_next" else k
                if end < 0:
                    continue
                for i in candidate_starts(end, self.cfg.window):
                    pairs.append((k, i, end))
            if pairs:
                feats = np.stack([bundle.attn_feature(k, i) for k, i, _ in pairs])
                scores = self.probes.span.predict_proba(feats)[:, 1]
                accepted = [
                    SpanScore(start=i, end=end, score=float(s))
                    for (k, i, end), s in zip(pairs, scores)
                    if s >= self.cfg.span_threshold
                ]
        entities = self._propagate(preds, adjacency, accepted)
        return Analysis(preds=preds, adjacency=adjacency, accepted=accepted,
                        entities=entities)

    def annotate_tokens(self, tokens: list[int]) -> list[EntitySpan]:
        if not tokens:
            return []
        if len(tokens) > self.model.cfg.max_context:
            raise ContextOverflowError(
                f"{len(tokens)} tokens exceed context {self.model.cfg.max_context}"
            )
        return self.analyze(tokens).entities

    def annotate_text(self, text: str) -> tuple[list[int], list[EntitySpan]]:
        tokens = self.vocab.encode(text)
        return tokens, self.annotate_tokens(tokens)
