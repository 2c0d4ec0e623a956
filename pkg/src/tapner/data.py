"""Synthetic corpus generation, oracle teacher annotation, and dataset files.

The corpus generator fills carrier templates with mentions drawn from
per-type lexicons. Gold IOB2 labels come from the placement itself, so they
are exact by construction. A rule-based teacher (longest-match lexicon
tagging) plays the annotator role in the generate-then-distill pipeline:
text is produced by the LM under greedy decoding, the teacher labels it end
to end, and the prompt region is recorded so feature building can mask it.

Corpus files are JSONL with one document per line:
``{"tokens": [str], "labels": [str], "origin": str, "prompt_len": int}``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .iob2 import EntitySpan, decode_iob2, encode_iob2
from .model.decoding import DecodeParams, greedy_generate
from .model.tokenizer import Vocab

_SLOT = re.compile(r"\{([A-Z_|]+)\}|\(([^)]+)\)")


@dataclass
class AnnotatedDoc:
    words: list[str]
    labels: list[str]
    origin: str = "synthetic"
    prompt_len: int = 0

    def __post_init__(self):
        if len(self.words) != len(self.labels):
            raise ValueError("words and labels must have equal length")
        if not 0 <= self.prompt_len <= len(self.words):
            raise ValueError("prompt_len out of range")

    def spans(self) -> list[EntitySpan]:
        return decode_iob2(self.labels)

    def token_ids(self, vocab: Vocab) -> list[int]:
        return vocab.encode_pieces(self.words)

    def to_json(self) -> dict:
        return {
            "tokens": self.words,
            "labels": self.labels,
            "origin": self.origin,
            "prompt_len": self.prompt_len,
        }

    @staticmethod
    def from_json(d: dict) -> "AnnotatedDoc":
        return AnnotatedDoc(
            words=list(d["tokens"]),
            labels=list(d["labels"]),
            origin=d.get("origin", "synthetic"),
            prompt_len=int(d.get("prompt_len", 0)),
        )


@dataclass
class Gazetteer:
    """Per-type mention lexicons plus a template grammar for carriers.

    Templates contain ``{TYPE}`` slots and ``(a|b or c)`` alternations.
    ``associations`` map a mention to its habitual companions per type
    ("anna reyes" mostly visits the same place, writes the same title);
    the generator prefers an association when filling a later slot of that
    type in the same document. This makes continuations after a mention
    depend on the mention's identity, which is what gives the attention
    weights from later positions back to mention starts their signal.
    """

    lexicons: dict[str, list[str]]
    templates: list[str]
    associations: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lexicons:
            raise ConfigError("gazetteer needs at least one entity type")
        seen: dict[str, str] = {}
        for etype, mentions in self.lexicons.items():
            if not mentions:
                raise ConfigError(f"empty lexicon for type {etype}")
            if not any(" " in m for m in mentions):
                raise ConfigError(f"type {etype} needs at least one multi-token mention")
            for m in mentions:
                if m in seen:
                    raise ConfigError(
                        f"mention {m!r} appears in both {seen[m]} and {etype}"
                    )
                seen[m] = etype
        for tpl in self.templates:
            for m in _SLOT.finditer(tpl):
                if m.group(1):
                    for etype in m.group(1).split("|"):
                        if etype not in self.lexicons:
                            raise ConfigError(f"template slot {etype} has no lexicon")

    @property
    def types(self) -> list[str]:
        return list(self.lexicons.keys())

    def vocabulary(self) -> list[str]:
        """All surface words the generator can emit (stable across samples)."""
        words = set()
        for mentions in self.lexicons.values():
            for m in mentions:
                words.update(m.split())
        for tpl in self.templates:
            pos = 0
            for m in _SLOT.finditer(tpl):
                words.update(tpl[pos : m.start()].split())
                if m.group(2):
                    for option in m.group(2).split("|"):
                        words.update(option.split())
                pos = m.end()
            words.update(tpl[pos:].split())
        return sorted(words)

    def to_json(self) -> dict:
        return {
            "lexicons": self.lexicons,
            "templates": self.templates,
            "associations": self.associations,
        }

    @staticmethod
    def from_json(d: dict) -> "Gazetteer":
        return Gazetteer(
            lexicons={k: list(v) for k, v in d["lexicons"].items()},
            templates=list(d["templates"]),
            associations={k: dict(v) for k, v in d.get("associations", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @staticmethod
    def load(path: str | Path) -> "Gazetteer":
        return Gazetteer.from_json(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _grid(firsts: list[str], seconds: list[str], stride: int) -> list[str]:
    """Two mentions per first word, cycling through the second words."""
    out = []
    for i, f in enumerate(firsts):
        out.append(f"{f} {seconds[i % len(seconds)]}")
        out.append(f"{f} {seconds[(i + stride) % len(seconds)]}")
    return out


def default_gazetteer() -> Gazetteer:
    """Built-in four-type gazetteer with deliberate cross-type ambiguity.

    Multi-token mentions come from combinatorial grids: first words repeat
    across mentions and so do second words ("anna reyes" / "anna vale" /
    "paul reyes"), so a mention's identity is carried by the combination,
    never by a single token. Several words also recur across types ("vale",
    "tan", "moss" as surnames and place/company words; "dune", "red",
    "karst" starting both places and titles), so per-token typing needs
    context and often resolves only at a mention's last token. Full mention
    strings stay disjoint across types. Mentions carry habitual companions
    (places, employers, titles) used by the association mechanism.
    """
    # First words recur across types (karst/vale/port/red/stone/kestrel...)
    # while second words are type-unique, so a mention's opening tokens are
    # often typeable only from context or from how the mention ends.
    person_firsts = ["anna", "omar", "hana", "riko", "lena", "paul", "mira",
                     "jon", "tova", "eli", "ravi", "kai", "karst", "vale"]
    person_lasts = ["reyes", "diaz", "moss", "tan", "lind", "atreides", "kerr"]
    gpe_firsts = ["port", "karst", "vale", "tan", "east", "kel", "red",
                  "dune", "stone"]
    gpe_seconds = ["ilum", "valley", "ridge", "harbor"]
    org_firsts = ["acme", "orion", "moss", "sen", "helix", "kestrel",
                  "novi", "port"]
    org_seconds = ["labs", "corp", "group", "works"]
    work_firsts = ["red", "glass", "winter", "stone", "kestrel", "karst"]
    work_seconds = ["mirror", "sea", "arc", "garden"]

    lexicons = {
        # index 5 = paul: lasts[5 % 7] = atreides, so "paul atreides" exists.
        "PERSON": _grid(person_firsts, person_lasts, 2)
        + ["omar", "mira", "orion"],
        "GPE": _grid(gpe_firsts, gpe_seconds, 1) + ["osset", "novi", "selem"],
        "ORG": _grid(org_firsts, org_seconds, 1) + ["nexora"],
        "WORK_OF_ART": _grid(work_firsts, work_seconds, 1)
        + ["dune", "karst valley tales", "the last ferry", "the kestrel song"],
    }
    # Where possible the token right after a mention already depends on the
    # mention's identity (its habitual companion follows within a token or
    # two), which is what makes the post-mention attention informative.
    templates = [
        "{PERSON} visited {GPE} last (spring|summer|winter) .",
        "{PERSON} joined {ORG} (today|yesterday|last week) .",
        "{PERSON} wrote {WORK_OF_ART} .",
        "{PERSON} praised {WORK_OF_ART} (twice|again) .",
        "{PERSON} toured {GPE} with {PERSON} .",
        "{PERSON} left {GPE} for {GPE} .",
        "{PERSON} is the protagonist of {WORK_OF_ART} .",
        "{ORG} entered {GPE} (this year|last year) .",
        "{ORG} hired {PERSON} in {GPE} .",
        "{ORG} published {WORK_OF_ART} .",
        "{GPE} borders {GPE} .",
        "the mayor of {GPE} met {PERSON} .",
        "{PERSON} and {PERSON} joined {ORG} .",
        "{PERSON} , {PERSON} and {PERSON} spoke at the conference .",
        "{WORK_OF_ART} won the award (this year|last year) .",
        "the editor praised {WORK_OF_ART} .",
        "the ceo of {ORG} lives in {GPE} .",
        "{PERSON|ORG} announced {WORK_OF_ART} (today|this week) .",
        "{PERSON|ORG} backed the deal .",
        "{PERSON|ORG|GPE} was featured in the report .",
        "{GPE|ORG} gained attention (this year|last year) .",
        "{PERSON|WORK_OF_ART} inspired the film .",
        "the story of {PERSON|GPE|WORK_OF_ART} spread quickly .",
        "the market opened late (today|yesterday) .",
        "the report was published last week .",
        "the meeting ran long (again|today) .",
    ]
    # Fixed companion assignments, spread over the lexicons with strides
    # coprime to their sizes. The playground's canonical pairing is pinned.
    person_multi = [m for m in lexicons["PERSON"] if " " in m]
    gpe_multi = [m for m in lexicons["GPE"] if " " in m]
    org_multi = [m for m in lexicons["ORG"] if " " in m]
    works = lexicons["WORK_OF_ART"]
    associations: dict[str, dict[str, str]] = {}
    for i, person in enumerate(person_multi):
        associations[person] = {
            "GPE": gpe_multi[(i * 5) % len(gpe_multi)],
            "ORG": org_multi[(i * 3) % len(org_multi)],
            "WORK_OF_ART": works[(i * 9) % len(works)],
        }
    associations["paul atreides"]["WORK_OF_ART"] = "dune"
    for j, org in enumerate(org_multi):
        associations[org] = {"GPE": gpe_multi[(j * 5 + 2) % len(gpe_multi)]}
    return Gazetteer(lexicons, templates, associations)


ASSOCIATION_RATE = 0.9


def _pick_mention(etype: str, gaz: Gazetteer, rng: np.random.Generator,
                  placed: list[str]) -> str:
    """Prefer the habitual companion of an already-placed mention."""
    if rng.random() < ASSOCIATION_RATE:
        for earlier in placed:
            companion = gaz.associations.get(earlier, {}).get(etype)
            if companion is not None:
                return companion
    options = gaz.lexicons[etype]
    return options[rng.integers(len(options))]


def _fill_template(tpl: str, gaz: Gazetteer, rng: np.random.Generator,
                   placed: list[str]) -> tuple[list[str], list[tuple[int, int, str]]]:
    words: list[str] = []
    spans: list[tuple[int, int, str]] = []
    pos = 0
    for m in _SLOT.finditer(tpl):
        words.extend(tpl[pos : m.start()].split())
        if m.group(1):
            # Union slots ({PERSON|ORG}) keep the carrier context
            # type-ambiguous; the mention itself must resolve the type.
            choices = m.group(1).split("|")
            etype = choices[rng.integers(len(choices))]
            mention = _pick_mention(etype, gaz, rng, placed)
            placed.append(mention)
            start = len(words)
            words.extend(mention.split())
            spans.append((start, len(words) - 1, etype))
        else:
            options = m.group(2).split("|")
            words.extend(options[rng.integers(len(options))].split())
        pos = m.end()
    words.extend(tpl[pos:].split())
    return words, spans


def synth_corpus(gazetteer: Gazetteer, n_docs: int, seed: int) -> list[AnnotatedDoc]:
    """Deterministic template-filled corpus with gold labels from placement.

    A document is one to three sentences; mentions placed earlier in the
    document pull their habitual companions into later slots.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    rng = np.random.default_rng(seed)
    docs = []
    n_templates = len(gazetteer.templates)
    for _ in range(n_docs):
        n_sentences = 1 + int(rng.choice([0, 1, 2], p=[0.25, 0.45, 0.3]))
        words: list[str] = []
        spans: list[EntitySpan] = []
        placed: list[str] = []
        for _ in range(n_sentences):
            tpl = gazetteer.templates[rng.integers(n_templates)]
            offset = len(words)
            sent_words, sent_spans = _fill_template(tpl, gazetteer, rng, placed)
            words.extend(sent_words)
            spans.extend(
                EntitySpan(offset + s, offset + e, t) for (s, e, t) in sent_spans
            )
        docs.append(AnnotatedDoc(words=words, labels=encode_iob2(spans, len(words))))
    return docs


def oracle_annotate(words: list[str], gazetteer: Gazetteer) -> list[str]:
    """Longest-match left-to-right lexicon tagging (the teacher).

    At each position the longest mention starting there wins; the scan then
    jumps past it, so overlapping matches resolve to the leftmost one.
    """
    lowered = [w.lower() for w in words]
    by_first: dict[str, list[tuple[tuple[str, ...], str]]] = {}
    for etype, mentions in gazetteer.lexicons.items():
        for m in mentions:
            parts = tuple(m.split())
            by_first.setdefault(parts[0], []).append((parts, etype))
    for cands in by_first.values():
        cands.sort(key=lambda c: -len(c[0]))
    spans = []
    i = 0
    n = len(lowered)
    while i < n:
        matched = False
        for parts, etype in by_first.get(lowered[i], ()):
            if i + len(parts) <= n and tuple(lowered[i : i + len(parts)]) == parts:
                spans.append(EntitySpan(i, i + len(parts) - 1, etype))
                i += len(parts)
                matched = True
                break
        if not matched:
            i += 1
    return encode_iob2(spans, n)


def distill_generate(
    model,
    vocab: Vocab,
    prompts: list[AnnotatedDoc],
    decode: DecodeParams,
    teacher=None,
    gazetteer: Gazetteer | None = None,
) -> list[AnnotatedDoc]:
    """Generate continuations for prompts and teacher-label them end to end."""
    if teacher is None:
        if gazetteer is None:
            raise ValueError("either a teacher callable or a gazetteer is required")
        teacher = lambda words: oracle_annotate(words, gazetteer)
    out = []
    for doc in prompts:
        prompt_ids = doc.token_ids(vocab)
        full_ids = greedy_generate(model, prompt_ids, decode)
        words = [vocab.piece(t) for t in full_ids]
        out.append(
            AnnotatedDoc(
                words=words,
                labels=teacher(words),
                origin="generated",
                prompt_len=len(prompt_ids),
            )
        )
    return out


@dataclass(frozen=True)
class DatasetManifest:
    n_docs: int
    corpus_seed: int
    split_seed: int
    ratios: tuple[float, float, float]
    split_sizes: dict[str, int]
    gazetteer_hash: str

    def to_json(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "corpus_seed": self.corpus_seed,
            "split_seed": self.split_seed,
            "ratios": list(self.ratios),
            "split_sizes": self.split_sizes,
            "gazetteer_hash": self.gazetteer_hash,
        }

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        return DatasetManifest(
            n_docs=int(d["n_docs"]),
            corpus_seed=int(d["corpus_seed"]),
            split_seed=int(d["split_seed"]),
            ratios=tuple(float(r) for r in d["ratios"]),
            split_sizes={k: int(v) for k, v in d["split_sizes"].items()},
            gazetteer_hash=d["gazetteer_hash"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        return DatasetManifest.from_json(json.loads(Path(path).read_text()))


def split_dataset(
    docs: list[AnnotatedDoc],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, list[AnnotatedDoc]]:
    """Seeded shuffle into disjoint train/dev/test splits."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    n = len(docs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    splits = {
        "train": [docs[i] for i in order[:n_train]],
        "dev": [docs[i] for i in order[n_train : n_train + n_dev]],
        "test": [docs[i] for i in order[n_train + n_dev :]],
    }
    for name, part in splits.items():
        if not part:
            raise ValueError(f"split {name!r} is empty; adjust ratios or n_docs")
    return splits


def build_dataset(
    gazetteer: Gazetteer,
    n_docs: int,
    corpus_seed: int,
    split_seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[dict[str, list[AnnotatedDoc]], DatasetManifest]:
    docs = synth_corpus(gazetteer, n_docs, corpus_seed)
    splits = split_dataset(docs, ratios, split_seed)
    manifest = DatasetManifest(
        n_docs=n_docs,
        corpus_seed=corpus_seed,
        split_seed=split_seed,
        ratios=tuple(ratios),
        split_sizes={k: len(v) for k, v in splits.items()},
        gazetteer_hash=gazetteer.content_hash(),
    )
    return splits, manifest


def regenerate_dataset(
    manifest: DatasetManifest, gazetteer: Gazetteer
) -> dict[str, list[AnnotatedDoc]]:
    """Rebuild the exact splits a manifest describes."""
    if gazetteer.content_hash() != manifest.gazetteer_hash:
        raise ConfigError("gazetteer does not match the manifest hash")
    splits, _ = build_dataset(
        gazetteer,
        manifest.n_docs,
        manifest.corpus_seed,
        manifest.split_seed,
        manifest.ratios,
    )
    return splits


def save_docs(path: str | Path, docs: list[AnnotatedDoc]) -> None:
    with open(path, "w") as f:
        for doc in docs:
            f.write(json.dumps(doc.to_json()) + "\n")


def load_docs(path: str | Path) -> list[AnnotatedDoc]:
    docs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                docs.append(AnnotatedDoc.from_json(json.loads(line)))
    return docs


def vocab_for(gazetteer: Gazetteer, granularity: str = "word") -> Vocab:
    """Vocabulary covering everything the generator and teacher can emit."""
    return Vocab.build([" ".join(gazetteer.vocabulary())], granularity)
