"""Feature extraction from representation bundles, and cached feature stores.

Three store tasks:

* ``typing``: one record per token; feature = hidden state at one tap,
  label = IOB2 label index (O is index 0).
* ``adjacency``: one record per adjacent pair (i, i+1); feature = attention
  from i+1 back to i; binary label (same mention or not).
* ``span``: one record per candidate (start, end) pair; feature = attention
  from the probe position k back to the start, where k = end for the
  ``span_last`` variant and k = end + 1 for ``span_next``. Positives are the
  gold spans; negatives are boundary-perturbed pairs (sharing a start or end
  with a positive, within a small distance) topped up with random causal
  pairs, capped at a multiple of the positive count.

Records from the prompt region of generated documents carry a mask flag and
are never sampled for training. Record order is deterministic by
(split, document, position).

On disk a store is a JSONL index (header line + one line per record) next to
a raw float64 matrix sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AnnotatedDoc
from .errors import EmptyStoreError
from .iob2 import iob2_labels
from .model.tokenizer import Vocab
from .spans import SPAN_NEXT, SPAN_VARIANTS

TASK_TYPING = "typing"
TASK_ADJACENCY = "adjacency"
TASK_SPAN = "span"
TASKS = (TASK_TYPING, TASK_ADJACENCY, TASK_SPAN)

SPLITS = ("train", "dev", "test")


def hidden_at(bundle, layer: int, i: int) -> np.ndarray:
    """Hidden-state feature: the tapped activation for token i at one tap."""
    return bundle.hidden_at(layer, i)


def attn_feature(bundle, j: int, i: int) -> np.ndarray:
    """Attention feature: weights from j back to i, layers (outer) x heads."""
    return bundle.attn_feature(j, i)


@dataclass(frozen=True)
class StoreSpec:
    task: str
    layer: int = 0
    variant: str = SPAN_NEXT
    window: int = 16
    prompt_mask: bool = True
    neighbor_distance: int = 8
    negative_cap: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown store task {self.task!r}")
        if self.task == TASK_SPAN and self.variant not in SPAN_VARIANTS:
            raise ValueError(f"unknown span variant {self.variant!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class FeatureStore:
    task: str
    labels: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    doc_ids: np.ndarray
    positions: list[tuple[int, ...]]
    masked: np.ndarray
    split: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.X)
        if not (len(self.y) == len(self.doc_ids) == len(self.positions)
                == len(self.masked) == len(self.split) == n):
            raise ValueError("store columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _select(self, split: str, include_masked: bool) -> np.ndarray:
        keep = np.array([s == split for s in self.split], dtype=bool)
        if not include_masked:
            keep &= ~self.masked
        return np.flatnonzero(keep)

    def arrays(self, split: str, include_masked: bool = False):
        idx = self._select(split, include_masked)
        return self.X[idx], self.y[idx]

    def train_arrays(self):
        """Training rows: the train split with masked records excluded."""
        return self.arrays("train", include_masked=False)

    def dev_arrays(self):
        return self.arrays("dev", include_masked=False)

    def test_arrays(self):
        return self.arrays("test", include_masked=False)

    # -- persistence: JSONL index + raw float64 sidecar -----------------------

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        header = {
            "task": self.task,
            "labels": list(self.labels),
            "dim": int(self.dim),
            "count": len(self),
            "dtype": "float64",
            "meta": self.meta,
        }
        with open(prefix.with_suffix(".jsonl"), "w") as f:
            f.write(json.dumps(header) + "\n")
            for i in range(len(self)):
                f.write(json.dumps({
                    "d": int(self.doc_ids[i]),
                    "p": list(self.positions[i]),
                    "y": int(self.y[i]),
                    "m": bool(self.masked[i]),
                    "s": self.split[i],
                }) + "\n")
        np.ascontiguousarray(self.X, dtype=np.float64).tofile(prefix.with_suffix(".bin"))

    @staticmethod
    def load(prefix: str | Path) -> "FeatureStore":
        prefix = Path(prefix)
        with open(prefix.with_suffix(".jsonl")) as f:
            header = json.loads(f.readline())
            rows = [json.loads(line) for line in f if line.strip()]
        if len(rows) != header["count"]:
            raise IOError(
                f"{prefix}: index has {len(rows)} records, header says {header['count']}"
            )
        X = np.fromfile(prefix.with_suffix(".bin"), dtype=np.float64)
        if X.size != header["count"] * header["dim"]:
            raise IOError(f"{prefix}: sidecar size does not match index")
        return FeatureStore(
            task=header["task"],
            labels=tuple(header["labels"]),
            X=X.reshape(header["count"], header["dim"]),
            y=np.array([r["y"] for r in rows], dtype=np.int64),
            doc_ids=np.array([r["d"] for r in rows], dtype=np.int64),
            positions=[tuple(r["p"]) for r in rows],
            masked=np.array([r["m"] for r in rows], dtype=bool),
            split=[r["s"] for r in rows],
            meta=header.get("meta", {}),
        )


def _span_pairs(doc: AnnotatedDoc, spec: StoreSpec, rng: np.random.Generator):
    """Candidate (start, end, label) pairs for the span task in one document."""
    n = len(doc.words)
    gold = {(s.start, s.end) for s in doc.spans()}
    max_end = n - 2 if spec.variant == SPAN_NEXT else n - 1

    def eligible(i: int, j: int) -> bool:
        if not (0 <= i <= j <= max_end):
            return False
        if j - i > spec.window and i != 0:
            return False
        return True

    positives = sorted((i, j) for (i, j) in gold if eligible(i, j))
    negatives: set[tuple[int, int]] = set()
    d = spec.neighbor_distance
    for (i, j) in positives:
        for jj in range(j - d, j + d + 1):
            if (i, jj) not in gold and eligible(i, jj):
                negatives.add((i, jj))
        for ii in range(i - d, i + d + 1):
            if (ii, j) not in gold and eligible(ii, j):
                negatives.add((ii, j))
    cap = max(spec.negative_cap * max(1, len(positives)), 1)
    negatives_list = sorted(negatives)
    if len(negatives_list) > cap:
        keep = rng.choice(len(negatives_list), size=cap, replace=False)
        negatives_list = [negatives_list[k] for k in sorted(keep)]
    else:
        # Top up with random causal pairs.
        budget = cap - len(negatives_list)
        attempts = 0
        while budget > 0 and attempts < 20 * cap and max_end >= 0:
            i = int(rng.integers(0, max_end + 1))
            j = int(rng.integers(i, max_end + 1))
            attempts += 1
            if (i, j) in gold or (i, j) in negatives or not eligible(i, j):
                continue
            negatives.add((i, j))
            negatives_list.append((i, j))
            budget -= 1
    pairs = [(i, j, 1) for (i, j) in positives]
    pairs += [(i, j, 0) for (i, j) in sorted(negatives_list)]
    pairs.sort(key=lambda r: (r[0], r[1]))
    return pairs


def _doc_records(doc: AnnotatedDoc, bundle, spec: StoreSpec, labels, rng):
    """(feature, label, positions, masked) records for one document."""
    records = []
    in_prompt = lambda pos: spec.prompt_mask and doc.origin == "generated" and pos < doc.prompt_len
    if spec.task == TASK_TYPING:
        label_index = {lab: k for k, lab in enumerate(labels)}
        for i in range(len(doc.words)):
            records.append((
                bundle.hidden_at(spec.layer, i),
                label_index[doc.labels[i]],
                (i,),
                in_prompt(i),
            ))
    elif spec.task == TASK_ADJACENCY:
        same = _same_mention_pairs(doc)
        for j in range(1, len(doc.words)):
            records.append((
                bundle.attn_feature(j, j - 1),
                int((j - 1, j) in same),
                (j - 1, j),
                in_prompt(j),
            ))
    else:
        for i, j, y in _span_pairs(doc, spec, rng):
            k = j + 1 if spec.variant == SPAN_NEXT else j
            records.append((bundle.attn_feature(k, i), y, (i, j), in_prompt(j)))
    return records


def _same_mention_pairs(doc: AnnotatedDoc) -> set[tuple[int, int]]:
    pairs = set()
    for s in doc.spans():
        for i in range(s.start, s.end):
            pairs.add((i, i + 1))
    return pairs


def _store_labels(spec: StoreSpec, entity_types: list[str] | None) -> tuple[str, ...]:
    if spec.task == TASK_TYPING:
        if entity_types is None:
            raise ValueError("typing stores need the entity type set")
        return tuple(iob2_labels(entity_types))
    return ("negative", "positive")


def build_stores(
    splits: dict[str, list[AnnotatedDoc]],
    model,
    vocab: Vocab,
    specs: list[StoreSpec],
    entity_types: list[str] | None = None,
) -> list[FeatureStore]:
    """Build several stores from one forward pass per document."""
    if not specs:
        raise ValueError("no store specs given")
    labels = [_store_labels(spec, entity_types) for spec in specs]
    rngs = [np.random.default_rng(spec.seed) for spec in specs]
    cols = [
        {"feats": [], "ys": [], "doc_ids": [], "positions": [], "masked": [],
         "split": []}
        for _ in specs
    ]
    doc_counter = 0
    for split in SPLITS:
        for doc in splits.get(split, []):
            bundle = model.forward_full(doc.token_ids(vocab))
            for si, spec in enumerate(specs):
                col = cols[si]
                for x, y, pos, m in _doc_records(doc, bundle, spec, labels[si], rngs[si]):
                    col["feats"].append(x)
                    col["ys"].append(y)
                    col["doc_ids"].append(doc_counter)
                    col["positions"].append(pos)
                    col["masked"].append(m)
                    col["split"].append(split)
            doc_counter += 1
    stores = []
    for spec, labs, col in zip(specs, labels, cols):
        if not col["feats"]:
            raise EmptyStoreError(f"no records were produced for task {spec.task!r}")
        stores.append(FeatureStore(
            task=spec.task,
            labels=labs,
            X=np.stack(col["feats"]),
            y=np.array(col["ys"], dtype=np.int64),
            doc_ids=np.array(col["doc_ids"], dtype=np.int64),
            positions=col["positions"],
            masked=np.array(col["masked"], dtype=bool),
            split=col["split"],
            meta={
                "layer": spec.layer,
                "variant": spec.variant,
                "window": spec.window,
                "prompt_mask": spec.prompt_mask,
            },
        ))
    return stores


def build_feature_store(
    splits: dict[str, list[AnnotatedDoc]],
    model,
    vocab: Vocab,
    spec: StoreSpec,
    entity_types: list[str] | None = None,
) -> FeatureStore:
    """Run the model over every document and cache probe features."""
    return build_stores(splits, model, vocab, [spec], entity_types)[0]


def build_typing_stores_all_layers(
    splits: dict[str, list[AnnotatedDoc]],
    model,
    vocab: Vocab,
    entity_types: list[str],
    prompt_mask: bool = True,
) -> list[FeatureStore]:
    """One typing store per tap point from a single pass over the corpus."""
    specs = [
        StoreSpec(task=TASK_TYPING, layer=l, prompt_mask=prompt_mask)
        for l in range(model.cfg.n_taps)
    ]
    return build_stores(splits, model, vocab, specs, entity_types)
