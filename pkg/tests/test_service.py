import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from tapner.iob2 import iob2_labels
from tapner.model import DecodeParams, ModelConfig, Vocab, init_model
from tapner.probe import ProbeClassifier
from tapner.service import ServiceConfig, create_app
from tapner.streaming import Pipeline, PipelineConfig, ProbeSet

TYPES = ["PERSON", "WORK_OF_ART"]
VOCAB = Vocab.build(["paul atreides is the protagonist of dune . " +
                     " ".join(f"w{i}" for i in range(20))])
CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                  vocab_size=len(VOCAB), max_context=64, seed=5)


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
    model = init_model(CFG)
    rng = np.random.default_rng(2)
    labels = iob2_labels(TYPES)
    probes = ProbeSet(
        entity_types=TYPES,
        typing={1: random_probe(rng, CFG.d_model, len(labels))},
        span=random_probe(rng, CFG.n_layers * CFG.n_heads, 2, scale=3.0),
        adjacency=random_probe(rng, CFG.n_layers * CFG.n_heads, 2, scale=3.0),
    )
    cfg = PipelineConfig(layer=1, window=6,
                         decode=DecodeParams(max_new_tokens=6, repetition_penalty=1.2))
    return Pipeline(model, VOCAB, probes, cfg)


@pytest.fixture()
def client(pipeline):
    app = create_app(pipeline, ServiceConfig(max_streams=2))
    with TestClient(app) as c:
        yield c


def sse_events(lines):
    """Parse SSE into (event, payload) pairs."""
    out = []
    event = None
    for line in lines:
        if line.startswith("event: "):
            event = line[len("event: "):]
        elif line.startswith("data: "):
            out.append((event or "message", json.loads(line[len("data: "):])))
            event = None
    return out


class TestMeta:
    def test_meta_shape(self, client):
        meta = client.get("/v1/meta").json()
        assert meta["entity_types"] == TYPES
        assert meta["defaults"]["strategy"] == "spanwise_propagation"
        assert meta["defaults"]["layer"] == 1
        assert meta["limits"]["max_streams"] == 2
        assert "n_params" in meta["model"]
        assert meta["labels"][0] == "O"


class TestAnnotate:
    def test_annotate_returns_tokens_and_spans(self, client):
        r = client.post("/v1/annotate", json={"text": "paul atreides is the w1"})
        assert r.status_code == 200
        body = r.json()
        assert body["tokens"][0] == "paul"
        for span in body["spans"]:
            assert set(span) == {"start", "end", "type", "score", "text"}

    def test_empty_text_is_400(self, client):
        assert client.post("/v1/annotate", json={"text": ""}).status_code == 400
        assert client.post("/v1/annotate", json={"text": "   "}).status_code == 400

    def test_malformed_body_is_400(self, client):
        assert client.post("/v1/annotate", json={"nope": 1}).status_code == 400
        assert client.post("/v1/annotate", json=[1, 2]).status_code == 400
        r = client.post("/v1/annotate", content=b"not json",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400

    def test_too_long_is_422(self, client):
        long_text = " ".join(["w1"] * (CFG.max_context + 1))
        assert client.post("/v1/annotate", json={"text": long_text}).status_code == 422


class TestStream:
    def test_stream_emits_events_then_done(self, client):
        with client.stream("POST", "/v1/stream",
                           json={"prompt": "paul atreides is",
                                 "params": {"max_new_tokens": 8}}) as r:
            assert r.status_code == 200
            assert r.headers["content-type"].startswith("text/event-stream")
            events = sse_events(r.iter_lines())
        # 3 prompt events + 8 generation events + done
        assert len(events) == 12
        assert [e for e, _ in events][-1] == "done"
        assert all(e == "message" for e, _ in events[:-1])
        payloads = [p for _, p in events[:-1]]
        assert [p["step"] for p in payloads] == list(range(11))
        for p in payloads:
            assert set(p) == {"step", "token", "tokenwise", "added",
                              "retracted", "retyped"}

    def test_done_payload_matches_annotate(self, client):
        body = {"prompt": "paul atreides is", "params": {"max_new_tokens": 5}}
        with client.stream("POST", "/v1/stream", json=body) as r:
            events = sse_events(r.iter_lines())
        done = events[-1][1]
        r2 = client.post("/v1/annotate", json={"text": done["text"]}).json()
        assert done["entities"] == r2["spans"]

    def test_sse_replay_reproduces_final_entities(self, client):
        body = {"prompt": "paul atreides is the", "params": {"max_new_tokens": 6}}
        with client.stream("POST", "/v1/stream", json=body) as r:
            events = sse_events(r.iter_lines())
        current = {}
        for kind, p in events:
            if kind == "done":
                final = {(s["start"], s["end"], s["type"]) for s in p["entities"]}
                continue
            for s in p["retracted"]:
                current.pop((s["start"], s["end"]), None)
            for s in p["retyped"]:
                current[(s["start"], s["end"])] = s["type"]
            for s in p["added"]:
                current[(s["start"], s["end"])] = s["type"]
        folded = {(a, b, t) for (a, b), t in current.items()}
        assert folded == final

    def test_param_overrides_validated(self, client):
        r = client.post("/v1/stream", json={"prompt": "w1", "params": {"bogus": 1}})
        assert r.status_code == 400
        r = client.post("/v1/stream",
                        json={"prompt": "w1", "params": {"span_threshold": 2.0}})
        assert r.status_code == 400

    def test_prompt_too_long_is_422(self, client):
        prompt = " ".join(["w1"] * 60)
        r = client.post("/v1/stream", json={"prompt": prompt,
                                            "params": {"max_new_tokens": 30}})
        assert r.status_code == 422

    def test_missing_prompt_is_400(self, client):
        assert client.post("/v1/stream", json={}).status_code == 400

    def test_strategy_override_changes_pipeline(self, client):
        body = {"prompt": "paul atreides is",
                "params": {"strategy": "tokenwise", "max_new_tokens": 2}}
        with client.stream("POST", "/v1/stream", json=body) as r:
            events = sse_events(r.iter_lines())
        assert events[-1][0] == "done"


class TestStreamLimit:
    def test_excess_streams_get_409(self, pipeline):
        app = create_app(pipeline, ServiceConfig(max_streams=1))
        with TestClient(app) as client:
            started = threading.Event()
            release = threading.Event()
            codes = {}

            # The endpoint derives a fresh Pipeline per request, but the model
            # instance is shared: slow its decode_step to hold the slot open.
            original = pipeline.model.decode_step

            def slow_step(cache, token_id):
                started.set()
                release.wait(timeout=5)
                return original(cache, token_id)

            pipeline.model.decode_step = slow_step
            try:
                def consume():
                    with client.stream("POST", "/v1/stream",
                                       json={"prompt": "w1 w2",
                                             "params": {"max_new_tokens": 3}}) as r:
                        codes["first"] = r.status_code
                        for _ in r.iter_lines():
                            pass

                t = threading.Thread(target=consume)
                t.start()
                assert started.wait(timeout=5)
                codes["second"] = client.post(
                    "/v1/stream",
                    json={"prompt": "w1", "params": {"max_new_tokens": 1}},
                ).status_code
                release.set()
                t.join(timeout=10)
            finally:
                del pipeline.model.decode_step
                release.set()
            assert codes["first"] == 200
            assert codes["second"] == 409

    def test_slot_released_after_completion(self, pipeline):
        app = create_app(pipeline, ServiceConfig(max_streams=1))
        with TestClient(app) as client:
            for _ in range(2):
                with client.stream("POST", "/v1/stream",
                                   json={"prompt": "w1",
                                         "params": {"max_new_tokens": 1}}) as r:
                    assert r.status_code == 200
                    list(r.iter_lines())
