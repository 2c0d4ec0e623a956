"""Pipeline evaluation and the few-shot nearest-neighbour mode.

``evaluate_pipeline`` runs batch annotation per document and scores every
propagation strategy with exact-match micro PRF, plus the isolated
mention-detection (type-blind) and entity-typing (gold spans, last-token
argmax) views.

Few-shot mode replaces trained probes with 1-NN lookups against a small
annotated support set: cosine similarity over hidden states at a layer two
thirds into the stack for typing, and over attention features for span
scoring. Both are wrapped as probe-shaped adapters so the regular pipeline
(and all propagation code) runs unchanged.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AnnotatedDoc
from .errors import ConfigError
from .iob2 import iob2_labels
from .metrics import PRF, entity_typing_prf, mention_detection_prf, micro_prf
from .model.tokenizer import Vocab
from .propagation import STRATEGIES, apply_strategy
from .streaming import Pipeline, PipelineConfig, ProbeSet
from .tap import StoreSpec, TASK_SPAN, TASK_TYPING, build_feature_store

log = logging.getLogger(__name__)


@dataclass
class StrategyScore:
    strategy: str
    ner: PRF
    mention_detection: PRF

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "ner": self.ner.as_dict(),
            "mention_detection": self.mention_detection.as_dict(),
        }


@dataclass
class EvalReport:
    rows: list[StrategyScore]
    entity_typing: PRF
    per_document: list[dict] = field(default_factory=list)

    def row(self, strategy: str) -> StrategyScore:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def to_json(self, path: str | Path | None = None) -> dict:
        data = {
            "strategies": [r.as_dict() for r in self.rows],
            "entity_typing": self.entity_typing.as_dict(),
            "per_document": self.per_document,
        }
        if path is not None:
            Path(path).write_text(json.dumps(data, indent=2))
        return data

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "P", "R", "F1", "MD-P", "MD-R", "MD-F1"])
            for r in self.rows:
                w.writerow([
                    r.strategy,
                    f"{r.ner.precision:.4f}", f"{r.ner.recall:.4f}", f"{r.ner.f1:.4f}",
                    f"{r.mention_detection.precision:.4f}",
                    f"{r.mention_detection.recall:.4f}",
                    f"{r.mention_detection.f1:.4f}",
                ])


def evaluate_pipeline(
    docs: list[AnnotatedDoc],
    pipeline: Pipeline,
    strategies: tuple[str, ...] = STRATEGIES,
    keep_documents: bool = False,
) -> EvalReport:
    """Score every strategy on one corpus, sharing probe outputs per doc."""
    if not docs:
        raise ValueError("no documents to evaluate")
    gold = [d.spans() for d in docs]
    pred_by_strategy = {s: [] for s in strategies}
    typing_rows = []
    per_document = []
    for doc in docs:
        analysis = pipeline.analyze(doc.token_ids(pipeline.vocab), strategies=strategies)
        typing_rows.append(analysis.preds)
        detail = {"tokens": doc.words, "gold": [s.key() for s in doc.spans()]}
        for s in strategies:
            ents = apply_strategy(
                s, analysis.preds, analysis.adjacency, analysis.accepted,
                adjacency_threshold=pipeline.cfg.adjacency_threshold,
            )
            pred_by_strategy[s].append(ents)
            detail[s] = [e.key() for e in ents]
        if keep_documents:
            per_document.append(detail)
    rows = [
        StrategyScore(
            strategy=s,
            ner=micro_prf(gold, pred_by_strategy[s]),
            mention_detection=mention_detection_prf(gold, pred_by_strategy[s]),
        )
        for s in strategies
    ]
    et_counts = [
        entity_typing_prf(doc_gold, preds)
        for doc_gold, preds in zip(gold, typing_rows)
    ]
    entity_typing = PRF.from_counts(
        tp=sum(c.tp for c in et_counts),
        fp=sum(c.fp for c in et_counts),
        fn=sum(c.fn for c in et_counts),
    )
    return EvalReport(rows=rows, entity_typing=entity_typing,
                      per_document=per_document)


# -- few-shot nearest-neighbour mode ------------------------------------------


def default_fewshot_layer(n_layers: int) -> int:
    """Tap two thirds deep into the stack."""
    return (2 * n_layers) // 3


class _NearestNeighborTypeProbe:
    """Probe-shaped 1-NN typing classifier over cached hidden features.

    The distribution is a softmax over per-class best cosine similarity, so
    the argmax is exactly the nearest neighbour's label and the runner-up is
    the second-closest class.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, n_classes: int, sharpness: float = 8.0):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        self._X = X / np.maximum(norms, 1e-12)
        self._y = y
        self.n_classes_ = n_classes
        self.in_dim_ = X.shape[1]
        self._sharpness = sharpness

    def _class_sims(self, Q: np.ndarray) -> np.ndarray:
        Qn = Q / np.maximum(np.linalg.norm(Q, axis=1, keepdims=True), 1e-12)
        sims = Qn @ self._X.T
        out = np.full((len(Q), self.n_classes_), -2.0)
        for c in range(self.n_classes_):
            mask = self._y == c
            if mask.any():
                out[:, c] = sims[:, mask].max(axis=1)
        return out

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        z = self._class_sims(X) * self._sharpness
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


class _NearestNeighborSpanProbe:
    """Probe-shaped 1-NN span scorer over support attention features.

    Score = clip((1 + sim_pos - sim_neg) / 2, 0, 1): above 0.5 exactly when
    the nearest support pair is a positive.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        self._X = X / np.maximum(norms, 1e-12)
        self._pos = np.asarray(y) == 1
        self.n_classes_ = 2
        self.in_dim_ = X.shape[1]

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        Qn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
        sims = Qn @ self._X.T
        sim_pos = sims[:, self._pos].max(axis=1) if self._pos.any() else np.full(len(X), -2.0)
        sim_neg = sims[:, ~self._pos].max(axis=1) if (~self._pos).any() else np.full(len(X), -2.0)
        s = np.clip((1.0 + sim_pos - sim_neg) / 2.0, 0.0, 1.0)
        return np.stack([1.0 - s, s], axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass
class SupportSet:
    """Cached representations of a k-shot annotated support corpus."""

    entity_types: list[str]
    layer: int
    variant: str
    window: int
    hidden_X: np.ndarray
    hidden_y: np.ndarray
    attn_X: np.ndarray
    attn_y: np.ndarray

    @staticmethod
    def build(
        docs: list[AnnotatedDoc],
        model,
        vocab: Vocab,
        entity_types: list[str],
        layer: int | None = None,
        variant: str = "span_next",
        window: int = 16,
        seed: int = 0,
    ) -> "SupportSet":
        if not docs:
            raise ConfigError("support set must be non-empty")
        layer = default_fewshot_layer(model.cfg.n_layers) if layer is None else layer
        labels = iob2_labels(entity_types)
        present = set()
        for d in docs:
            present.update(s.type for s in d.spans())
        missing = [t for t in entity_types if t not in present]
        if missing:
            raise ConfigError(f"support set lacks mentions for types: {missing}")
        split = {"train": docs}
        t_store = build_feature_store(
            split, model, vocab,
            StoreSpec(task=TASK_TYPING, layer=layer, seed=seed),
            entity_types=entity_types,
        )
        s_store = build_feature_store(
            split, model, vocab,
            StoreSpec(task=TASK_SPAN, variant=variant, window=window, seed=seed),
        )
        assert list(t_store.labels) == labels
        return SupportSet(
            entity_types=list(entity_types),
            layer=layer,
            variant=variant,
            window=window,
            hidden_X=t_store.X,
            hidden_y=t_store.y,
            attn_X=s_store.X,
            attn_y=s_store.y,
        )


def fewshot_pipeline(
    support: SupportSet, model, vocab: Vocab, cfg: PipelineConfig | None = None
) -> Pipeline:
    """Regular pipeline whose probes are 1-NN lookups into the support set."""
    labels = iob2_labels(support.entity_types)
    typing = _NearestNeighborTypeProbe(support.hidden_X, support.hidden_y, len(labels))
    span = _NearestNeighborSpanProbe(support.attn_X, support.attn_y)
    probes = ProbeSet(entity_types=list(support.entity_types),
                      typing={support.layer: typing}, span=span)
    if cfg is None:
        cfg = PipelineConfig(layer=support.layer, variant=support.variant,
                             window=support.window)
    elif cfg.layer != support.layer:
        raise ConfigError("pipeline layer must match the support set layer")
    return Pipeline(model, vocab, probes, cfg)


def fewshot_annotate(support: SupportSet, model, vocab: Vocab,
                     tokens: list[int], cfg: PipelineConfig | None = None):
    return fewshot_pipeline(support, model, vocab, cfg).annotate_tokens(tokens)


def sample_support(
    pool: list[AnnotatedDoc], entity_types: list[str], k: int,
    rng: np.random.Generator,
) -> list[AnnotatedDoc]:
    """k-shot support: per type, take docs until k mentions are covered.

    Documents are drawn from one seeded permutation, so supports for growing
    k are nested. Mentions of other types inside a chosen document count
    toward those types too.
    """
    order = rng.permutation(len(pool))
    counts = {t: 0 for t in entity_types}
    chosen: list[int] = []
    for t in entity_types:
        if counts[t] >= k:
            continue
        for idx in order:
            if counts[t] >= k:
                break
            doc = pool[idx]
            mentions = [s.type for s in doc.spans()]
            if t not in mentions or idx in chosen:
                continue
            chosen.append(idx)
            for m in mentions:
                if m in counts:
                    counts[m] += 1
    return [pool[i] for i in sorted(set(chosen))]


def run_fewshot_episodes(
    pool: list[AnnotatedDoc],
    eval_docs: list[AnnotatedDoc],
    model,
    vocab: Vocab,
    entity_types: list[str],
    ks: tuple[int, ...] = (1, 5, 10, 50),
    episodes: int = 20,
    seed: int = 0,
    cfg: PipelineConfig | None = None,
) -> dict[int, float]:
    """Mean micro-F1 per k over seeded episodes."""
    means = {k: [] for k in ks}
    gold = [d.spans() for d in eval_docs]
    for ep in range(episodes):
        for k in ks:
            # One permutation per episode: supports are nested across k.
            support_docs = sample_support(pool, entity_types, k,
                                          np.random.default_rng((seed, ep, 17)))
            support = SupportSet.build(support_docs, model, vocab, entity_types)
            pipe = fewshot_pipeline(support, model, vocab, cfg)
            preds = [pipe.annotate_tokens(d.token_ids(vocab)) for d in eval_docs]
            means[k].append(micro_prf(gold, preds).f1)
        log.info("few-shot episode %d/%d done", ep + 1, episodes)
    return {k: float(np.mean(v)) for k, v in means.items()}
