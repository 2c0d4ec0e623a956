"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The desk-scale pipeline (tiny LM + probes) comes from the session fixture in
conftest.py; pure-logic criteria build their own inputs. Tolerances are
pinned here, not configurable.
"""

import itertools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from tapner.bench import run_bench
from tapner.evaluation import evaluate_pipeline, run_fewshot_episodes
from tapner.iob2 import decode_iob2, encode_iob2, iob2_labels
from tapner.metrics import mention_detection_prf
from tapner.probe import mlp_loss, mlp_loss_and_grads
from tapner.propagation import (
    TokenwisePrediction,
    propagate_adjacency,
    spanwise_propagation,
    spanwise_typing,
    tokenwise_only,
)
from tapner.spans import AdjacencyScore, SpanScore, resolve_overlaps
from tapner.streaming import Pipeline, PipelineConfig

from reference_impls import (
    ref_adjacency,
    ref_decode,
    ref_spanwise_propagation,
    ref_spanwise_typing,
    ref_tokenwise,
)

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] {name}: FAIL", flush=True)
        raise
    print(f"\n[ACCEPTANCE] {name}: PASS", flush=True)


# -- 1. incremental == batch ----------------------------------------------------


def test_incremental_equals_batch(artifacts):
    with criterion("incremental == batch (100 seeded prompts, exact)"):
        pipe = artifacts.pipeline
        rng = np.random.default_rng(100)
        docs = artifacts.splits["dev"]
        t0 = time.time()
        mismatches = 0
        for trial in range(100):
            doc = docs[int(rng.integers(len(docs)))]
            ids = doc.token_ids(artifacts.vocab)
            cut = int(rng.integers(3, max(4, min(len(ids), 10))))
            prompt = ids[:cut]
            result = pipe.run_stream(prompt, max_new_tokens=12)
            batch = pipe.annotate_tokens(result.tokens)
            if [s.key() for s in result.entities] != [s.key() for s in batch]:
                mismatches += 1
        elapsed = time.time() - t0
        assert mismatches == 0
        assert elapsed < 60, f"took {elapsed:.1f}s, budget is 60s"


# -- 2. propagation strategies vs brute-force references ------------------------


def test_propagation_matches_bruteforce_references():
    with criterion("propagation == brute-force references (1000 random sets)"):
        labels = tuple(iob2_labels(["PER", "LOC", "ORG"]))
        rng = np.random.default_rng(7)
        t0 = time.time()
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            preds = [
                TokenwisePrediction(labels=labels,
                                    probs=rng.dirichlet(np.ones(len(labels))))
                for _ in range(n)
            ]
            adj = [AdjacencyScore(left=i, score=float(rng.random()))
                   for i in range(n - 1)]
            cands = [
                SpanScore(i, j, float(rng.random()))
                for i in range(n) for j in range(i, n)
                if rng.random() < 0.3
            ]
            rows = [p.probs for p in preds]
            adj_map = {a.right: a.score for a in adj}
            triples = [(c.start, c.end, c.score) for c in cands]

            assert [s.key() for s in tokenwise_only(preds)] == \
                ref_tokenwise(rows, labels)
            assert [s.key() for s in propagate_adjacency(preds, adj)] == \
                ref_adjacency(rows, labels, adj_map)
            assert [s.key() for s in spanwise_typing(resolve_overlaps(cands), preds)] == \
                ref_spanwise_typing(rows, labels, triples)
            assert [s.key() for s in spanwise_propagation(preds, cands)] == \
                ref_spanwise_propagation(rows, labels, triples)
        elapsed = time.time() - t0
        assert elapsed < 10, f"took {elapsed:.1f}s, budget is 10s"


# -- 3. IOB2 round-trip and repair oracle ----------------------------------------


def _random_valid_labels(rng, length, types):
    labels = ["O"] * length
    i = 0
    while i < length:
        if rng.random() < 0.4:
            t = types[rng.integers(len(types))]
            j = min(length - 1, i + int(rng.integers(0, 3)))
            labels[i] = f"B-{t}"
            for k in range(i + 1, j + 1):
                labels[k] = f"I-{t}"
            i = j + 1
        else:
            i += 1
    return labels


def test_iob2_round_trip_and_repair_oracle():
    with criterion("IOB2 round-trip (10k strings) and exhaustive repair oracle"):
        types = ["PER", "LOC", "ORG"]
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            labels = _random_valid_labels(rng, int(rng.integers(1, 14)), types)
            assert encode_iob2(decode_iob2(labels), len(labels)) == labels

        alphabet = iob2_labels(types)  # 7 symbols
        for length in range(0, 5):
            for combo in itertools.product(alphabet, repeat=length):
                labels = list(combo)
                assert [s.key() for s in decode_iob2(labels)] == ref_decode(labels)


# -- 4. probe gradient check ------------------------------------------------------


def test_probe_gradient_check():
    with criterion("MLP analytic gradients vs central differences (50 probes)"):
        rng = np.random.default_rng(17)
        h = 1e-6
        for _ in range(50):
            d_in = int(rng.integers(2, 6))
            d_h = int(rng.integers(2, 9))
            n_cls = int(rng.integers(2, 5))
            n = int(rng.integers(2, 8))
            params = [
                rng.normal(size=(d_in, d_h)), rng.normal(size=d_h),
                rng.normal(size=(d_h, n_cls)), rng.normal(size=n_cls),
            ]
            X = rng.normal(size=(n, d_in))
            y = rng.integers(0, n_cls, size=n)
            _, grads = mlp_loss_and_grads(*params, X, y)
            for pi, g in enumerate(grads):
                flat = params[pi].reshape(-1)
                g_flat = np.asarray(g).reshape(-1)
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + h
                    up = mlp_loss(*params, X, y)
                    flat[k] = orig - h
                    down = mlp_loss(*params, X, y)
                    flat[k] = orig
                    numeric = (up - down) / (2 * h)
                    denom = max(1.0, abs(numeric), abs(g_flat[k]))
                    assert abs(numeric - g_flat[k]) / denom < 1e-4


# -- 5. end-to-end desk-scale NER --------------------------------------------------


def test_end_to_end_ner_quality_and_strategy_ordering(artifacts):
    with criterion("end-to-end NER: spanwise propagation F1 >= 0.85 and "
                   "strategy ordering"):
        assert artifacts.build_seconds < 15 * 60, (
            f"pipeline build took {artifacts.build_seconds:.0f}s, budget 900s"
        )
        report = evaluate_pipeline(artifacts.splits["test"], artifacts.pipeline)
        by = {r.strategy: r.ner for r in report.rows}
        for name, prf in by.items():
            print(f"  {name:<22} P={prf.precision:.4f} R={prf.recall:.4f} "
                  f"F1={prf.f1:.4f}")
        assert by["spanwise_propagation"].f1 >= 0.85
        assert by["tokenwise"].f1 < by["adjacency"].f1
        assert by["adjacency"].f1 < by["spanwise_typing"].f1
        assert by["adjacency"].f1 < by["spanwise_propagation"].f1
        best_precision = max(prf.precision for prf in by.values())
        assert by["spanwise_propagation"].precision == best_precision


# -- 6. streaming cost structure ---------------------------------------------------


def test_streaming_cost_structure(artifacts):
    with criterion("streaming cost: length-stable incremental path, growing "
                   "re-run baseline"):
        pipe = artifacts.pipeline
        docs = artifacts.splits["dev"]
        prompts = [d.token_ids(artifacts.vocab)[:6] for d in docs[:3]]
        t0 = time.time()
        report = run_bench(pipe, prompts, lengths=[32, 128, 250], reps=3, warmup=1)
        elapsed = time.time() - t0
        print("\n" + report.pretty_table())

        stream_32 = report.cell("streaming", 32).ms_per_token_mean
        stream_250 = report.cell("streaming", 250).ms_per_token_mean
        rerun_32 = report.cell("rerun_baseline", 32).ms_per_token_mean
        rerun_250 = report.cell("rerun_baseline", 250).ms_per_token_mean
        assert stream_250 <= 1.5 * stream_32, (
            f"streaming grew {stream_250 / stream_32:.2f}x from n=32 to n=250"
        )
        assert rerun_250 >= 4.0 * rerun_32, (
            f"re-run baseline grew only {rerun_250 / rerun_32:.2f}x"
        )
        stream_rel = report.cell("streaming", 128).delta_rel
        rerun_rel = report.cell("rerun_baseline", 128).delta_rel
        assert rerun_rel >= 5.0 * stream_rel, (
            f"re-run overhead {rerun_rel:.2%} not >= 5x streaming {stream_rel:.2%}"
        )
        assert report.spans_equal
        assert elapsed < 300, f"bench took {elapsed:.0f}s, budget 300s"


# -- 7. generated-vs-original recall gap -------------------------------------------


def _generated_region_md_recall(docs, pipeline):
    gold, pred = [], []
    for doc in docs:
        spans = pipeline.annotate_tokens(doc.token_ids(pipeline.vocab))
        gold.append([s for s in doc.spans() if s.start >= doc.prompt_len])
        pred.append([s for s in spans if s.start >= doc.prompt_len])
    return mention_detection_prf(gold, pred).recall


def test_generated_recall_gap(artifacts):
    with criterion("span probe trained on non-generated text loses >= 5 recall "
                   "points on generated text"):
        base = artifacts.pipeline
        synth_pipe = base
        gen_probes = type(base.probes)(
            entity_types=base.probes.entity_types,
            typing=base.probes.typing,
            span=artifacts.span_probe_generated,
            adjacency=base.probes.adjacency,
        )
        gen_pipe = Pipeline(base.model, base.vocab, gen_probes, base.cfg)
        eval_docs = artifacts.generated["test"]
        recall_synth = _generated_region_md_recall(eval_docs, synth_pipe)
        recall_gen = _generated_region_md_recall(eval_docs, gen_pipe)
        print(f"\n  MD recall on generated text: synthetic-trained span probe "
              f"{recall_synth:.4f} vs generated-trained {recall_gen:.4f}")
        assert recall_gen - recall_synth >= 0.05


# -- 8. few-shot monotonicity -------------------------------------------------------


def test_fewshot_monotonicity(artifacts):
    with criterion("few-shot mean F1 non-decreasing over k in {1, 5, 10, 50}"):
        ks = (1, 5, 10, 50)
        result = run_fewshot_episodes(
            pool=artifacts.splits["train"],
            eval_docs=artifacts.splits["test"][:20],
            model=artifacts.model,
            vocab=artifacts.vocab,
            entity_types=artifacts.gazetteer.types,
            ks=ks,
            episodes=20,
            seed=0,
        )
        print("\n  " + "  ".join(f"{k}-shot={result[k]:.4f}" for k in ks))
        for a, b in zip(ks, ks[1:]):
            assert result[a] <= result[b] + 1e-9, (
                f"mean F1 decreased from k={a} ({result[a]:.4f}) "
                f"to k={b} ({result[b]:.4f})"
            )
