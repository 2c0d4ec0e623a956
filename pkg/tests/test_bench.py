import numpy as np
import pytest

from tapner.bench import MODES, run_bench
from tapner.iob2 import iob2_labels
from tapner.model import DecodeParams, ModelConfig, Vocab, init_model
from tapner.probe import ProbeClassifier
from tapner.streaming import Pipeline, PipelineConfig, ProbeSet

VOCAB = Vocab.build([" ".join(f"w{i}" for i in range(25))])
CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                  vocab_size=len(VOCAB), max_context=128, seed=4)
TYPES = ["PERSON"]


def random_probe(rng, in_dim, n_classes, scale=2.0):
    p = ProbeClassifier(n_neurons=32)
    p.W1_ = rng.normal(0, scale, size=(in_dim, 32))
    p.b1_ = rng.normal(0, 0.1, size=32)
    p.W2_ = rng.normal(0, scale, size=(32, n_classes))
    p.b2_ = rng.normal(0, 0.1, size=n_classes)
    p.in_dim_, p.n_classes_ = in_dim, n_classes
    return p


@pytest.fixture(scope="module")
def pipeline():
    rng = np.random.default_rng(1)
    labels = iob2_labels(TYPES)
    probes = ProbeSet(
        entity_types=TYPES,
        typing={1: random_probe(rng, CFG.d_model, len(labels))},
        span=random_probe(rng, CFG.n_layers * CFG.n_heads, 2, scale=3.0),
    )
    return Pipeline(init_model(CFG), VOCAB, probes,
                    PipelineConfig(layer=1, window=6))


class TestBench:
    def test_report_structure(self, pipeline):
        report = run_bench(pipeline, [[3, 4, 5]], lengths=[8, 16], reps=2, warmup=1)
        assert set(report.cells) == {(m, n) for m in MODES for n in (8, 16)}
        gen = report.cell("generation_only", 8)
        assert gen.delta_rel is None
        stream = report.cell("streaming", 8)
        assert stream.delta_rel is not None
        assert stream.ms_per_token_mean > 0
        assert stream.tokens_per_s == pytest.approx(1000 / stream.ms_per_token_mean)

    def test_streaming_and_rerun_spans_agree(self, pipeline):
        report = run_bench(pipeline, [[3, 4, 5]], lengths=[8], reps=1, warmup=0)
        assert report.spans_equal

    def test_single_rep_reports_zero_stdev_with_warning(self, pipeline, caplog):
        import logging
        with caplog.at_level(logging.WARNING):
            report = run_bench(pipeline, [[3, 4]], lengths=[4], reps=1, warmup=0)
        assert report.single_rep_warning
        assert report.cell("streaming", 4).ms_per_token_stdev == 0.0
        assert any("reps=1" in m for m in caplog.messages)

    def test_lengths_must_ascend(self, pipeline):
        with pytest.raises(ValueError):
            run_bench(pipeline, [[3]], lengths=[16, 8], reps=1)

    def test_length_exceeding_context_rejected(self, pipeline):
        with pytest.raises(ValueError):
            run_bench(pipeline, [[3] * 10], lengths=[CFG.max_context], reps=1)

    def test_json_and_table_render(self, pipeline, tmp_path):
        report = run_bench(pipeline, [[3, 4]], lengths=[4], reps=2, warmup=0)
        data = report.to_json(tmp_path / "bench.json")
        assert (tmp_path / "bench.json").exists()
        assert len(data["cells"]) == 3
        table = report.pretty_table()
        assert "generation_only" in table and "rerun_baseline" in table
