"""Command-line surface.

Every subcommand works against a run directory holding the artifacts:

    runs/demo/
      gazetteer.json  vocab.json  manifest.json
      corpus/{train,dev,test}.jsonl  corpus/generated_*.jsonl
      model.bin
      probes/typing_l*.bin  probes/span.bin  probes/adjacency.bin
      pipeline.json  reports/

Options resolve as: explicit flag > --config file value > built-in default.
The config file is JSON or TOML; keys may be flat or grouped per subcommand.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .bench import run_bench
from .data import (
    DatasetManifest,
    Gazetteer,
    build_dataset,
    default_gazetteer,
    distill_generate,
    load_docs,
    save_docs,
    vocab_for,
)
from .errors import TapnerError
from .evaluation import evaluate_pipeline, run_fewshot_episodes
from .model import (
    DecodeParams,
    LMTrainConfig,
    ModelConfig,
    Vocab,
    init_model,
    lm_eval_loss,
    load_model,
    save_model,
    train_toy_lm,
)
from .probe import TrainConfig, grid_search, save_probe, sweep_layers, train_probe
from .propagation import STRATEGIES
from .service import ServiceConfig, serve
from .streaming import Pipeline, PipelineConfig, ProbeSet, event_to_json
from .tap import StoreSpec, build_feature_store, build_typing_stores_all_layers

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run directory -------------------------------------------------------------


class RunDir:
    def __init__(self, path: str | Path):
        self.root = Path(path)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise TapnerError(f"missing artifact: {p} (run the earlier pipeline steps first)")
        return p

    def load_vocab(self) -> Vocab:
        return Vocab.load(self.require("vocab.json"))

    def load_gazetteer(self) -> Gazetteer:
        return Gazetteer.load(self.require("gazetteer.json"))

    def load_splits(self, prefix: str = "") -> dict:
        return {
            s: load_docs(self.require("corpus", f"{prefix}{s}.jsonl"))
            for s in ("train", "dev", "test")
        }

    def load_model(self):
        return load_model(self.require("model.bin"))

    def pipeline_config(self) -> dict:
        p = self.path("pipeline.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def update_pipeline_config(self, **kv) -> dict:
        cfg = self.pipeline_config()
        cfg.update(kv)
        self.path("pipeline.json").write_text(json.dumps(cfg, indent=2))
        return cfg

    def load_pipeline(self, overrides: dict | None = None) -> Pipeline:
        model = self.load_model()
        vocab = self.load_vocab()
        probes = ProbeSet.load(self.require("probes"))
        stored = self.pipeline_config()
        stored.update(overrides or {})
        if "layer" not in stored:
            raise TapnerError("pipeline.json has no layer; run `tapner sweep` or `train --task typing`")
        cfg = PipelineConfig.from_json(stored)
        return Pipeline(model, vocab, probes, cfg)


# -- config-file handling --------------------------------------------------------


def _load_config_file(path: str | None, subcommand: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    if p.suffix == ".toml":
        data = tomllib.loads(p.read_text())
    else:
        data = json.loads(p.read_text())
    if subcommand in data and isinstance(data[subcommand], dict):
        merged = {k: v for k, v in data.items() if not isinstance(v, dict)}
        merged.update(data[subcommand])
        return merged
    return data


class _Resolver:
    """flag > config value > default."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.args = args
        self.config = config

    def get(self, name: str, default=None):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        if name in self.config:
            return self.config[name]
        return default


# -- subcommand handlers ----------------------------------------------------------


def _cmd_datagen(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "datagen"))
    run = RunDir(args.run)
    run.path("corpus").mkdir(parents=True, exist_ok=True)
    gaz_path = run.path("gazetteer.json")
    if cfg.get("gazetteer"):
        gazetteer = Gazetteer.load(cfg.get("gazetteer"))
    elif gaz_path.exists():
        gazetteer = Gazetteer.load(gaz_path)
    else:
        gazetteer = default_gazetteer()
    gazetteer.save(gaz_path)

    if args.distill:
        model = run.load_model()
        vocab = run.load_vocab()
        decode = DecodeParams(
            max_new_tokens=int(cfg.get("distill_new_tokens", 40)),
            repetition_penalty=float(cfg.get("repetition_penalty", 1.2)),
        )
        splits = run.load_splits()
        for split, docs in splits.items():
            generated = distill_generate(model, vocab, docs, decode, gazetteer=gazetteer)
            out = run.path("corpus", f"generated_{split}.jsonl")
            save_docs(out, generated)
            print(f"wrote {out} ({len(generated)} docs)")
        return 0

    n_docs = int(cfg.get("n_docs", 3000))
    corpus_seed = int(cfg.get("seed", 0))
    split_seed = int(cfg.get("split_seed", 1))
    splits, manifest = build_dataset(gazetteer, n_docs, corpus_seed, split_seed)
    for split, docs in splits.items():
        save_docs(run.path("corpus", f"{split}.jsonl"), docs)
    manifest.save(run.path("manifest.json"))
    vocab = vocab_for(gazetteer)
    vocab.save(run.path("vocab.json"))
    print(f"wrote corpus under {run.path('corpus')} "
          f"(sizes: {manifest.split_sizes}, vocab: {len(vocab)})")
    return 0


def _model_config(cfg: _Resolver, vocab: Vocab) -> ModelConfig:
    return ModelConfig(
        n_layers=int(cfg.get("n_layers", 4)),
        n_heads=int(cfg.get("n_heads", 4)),
        d_model=int(cfg.get("d_model", 128)),
        d_ff=int(cfg.get("d_ff", 512)),
        vocab_size=len(vocab),
        max_context=int(cfg.get("max_context", 256)),
        seed=int(cfg.get("model_seed", 0)),
    )


def _train_config(cfg: _Resolver, task: str) -> TrainConfig:
    return TrainConfig(
        lr=float(cfg.get("lr", 1e-4)),
        batch_size=int(cfg.get("batch", 1024)),
        epochs=int(cfg.get("epochs", 50 if task in ("span", "adjacency") else 25)),
        n_neurons=int(cfg.get("n_neurons", 1024)),
        weight_decay=float(cfg.get("weight_decay", 0.01)),
        seed=int(cfg.get("seed", 0)),
    )


def _cmd_train(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "train"))
    run = RunDir(args.run)
    vocab = run.load_vocab()
    task = args.task

    if task == "lm":
        splits = run.load_splits()
        model = init_model(_model_config(cfg, vocab))
        # LM keys are distinct from probe keys (lm_batch/lm_lr vs batch/lr)
        # so one config file can drive both training tasks.
        lm_cfg = LMTrainConfig(
            steps=int(cfg.get("steps", 2000)),
            batch_size=int(cfg.get("lm_batch", 16)),
            seq_len=int(cfg.get("seq_len", 48)),
            lr=float(cfg.get("lm_lr", 3e-3)),
            warmup_steps=int(cfg.get("warmup_steps", 60)),
            seed=int(cfg.get("seed", 0)),
        )
        docs = [d.token_ids(vocab) for d in splits["train"]]
        held_out = [d.token_ids(vocab) for d in splits["dev"]]
        before = lm_eval_loss(model, held_out, pad_id=vocab.pad_id)
        train_toy_lm(model, docs, lm_cfg, separator_id=vocab.bos_id)
        after = lm_eval_loss(model, held_out, pad_id=vocab.pad_id)
        save_model(model, run.path("model.bin"))
        print(f"trained LM: dev loss {before:.4f} -> {after:.4f}; "
              f"{model.n_params()} params -> {run.path('model.bin')}")
        return 0

    model = run.load_model()
    gazetteer = run.load_gazetteer()
    corpus_kind = cfg.get("corpus", "synthetic")
    prefix = "generated_" if corpus_kind == "generated" else ""
    splits = run.load_splits(prefix)
    run.path("probes").mkdir(parents=True, exist_ok=True)
    train_cfg = _train_config(cfg, task)

    if task == "typing":
        layer = cfg.get("layer")
        if layer is None:
            layer = run.pipeline_config().get("layer")
        if layer is None:
            raise TapnerError("no --layer given and pipeline.json has none; run `tapner sweep`")
        layer = int(layer)
        spec = StoreSpec(task="typing", layer=layer, seed=train_cfg.seed)
        store = build_feature_store(splits, model, vocab, spec,
                                    entity_types=gazetteer.types)
        if args.grid:
            grid = [TrainConfig(lr=lr, batch_size=b, epochs=train_cfg.epochs,
                                n_neurons=train_cfg.n_neurons, seed=train_cfg.seed)
                    for lr in (5e-4, 1e-4, 5e-5) for b in (1024, 4096)]
            best, _ = grid_search({"typing": store}, grid,
                                  out_csv=run.path("probes", "grid_typing.csv"))
            probe, chosen, metric = best["typing"]
            print(f"grid best: lr={chosen.lr} batch={chosen.batch_size} dev={metric:.4f}")
        else:
            probe = train_probe(store, train_cfg)
        save_probe(probe, run.path("probes", f"typing_l{layer}.bin"),
                   {"entity_types": gazetteer.types, "task": "typing", "layer": layer})
        run.update_pipeline_config(layer=layer)
        _write_history_csv(run.path("probes", f"typing_l{layer}_history.csv"), probe)
        print(f"typing probe (layer {layer}) dev metric: {probe.dev_metric_:.4f}")
        return 0

    if task in ("span", "adjacency"):
        variant = cfg.get("variant", "span_next")
        window = int(cfg.get("window", 16))
        spec = StoreSpec(task=task, variant=variant, window=window, seed=train_cfg.seed)
        store = build_feature_store(splits, model, vocab, spec)
        probe = train_probe(store, train_cfg)
        save_probe(probe, run.path("probes", f"{task}.bin"),
                   {"entity_types": gazetteer.types, "task": task,
                    "variant": variant, "window": window, "corpus": corpus_kind})
        if task == "span":
            run.update_pipeline_config(variant=variant, window=window)
        _write_history_csv(run.path("probes", f"{task}_history.csv"), probe)
        print(f"{task} probe dev metric: {probe.dev_metric_:.4f} (corpus: {corpus_kind})")
        return 0

    raise UsageError(f"unknown task {task!r}")


def _write_history_csv(path: Path, probe) -> None:
    import csv as _csv

    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["epoch", "train_loss", "dev_metric"])
        for row in probe.history_:
            w.writerow([row["epoch"], f"{row['train_loss']:.6f}",
                        "" if row["dev_metric"] is None else f"{row['dev_metric']:.6f}"])


def _cmd_sweep(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "sweep"))
    run = RunDir(args.run)
    vocab = run.load_vocab()
    model = run.load_model()
    gazetteer = run.load_gazetteer()
    splits = run.load_splits()
    train_cfg = _train_config(cfg, "typing")
    stores = build_typing_stores_all_layers(splits, model, vocab, gazetteer.types)
    result, probes = sweep_layers(stores, train_cfg)
    run.path("probes").mkdir(parents=True, exist_ok=True)
    for layer, probe in enumerate(probes):
        save_probe(probe, run.path("probes", f"typing_l{layer}.bin"),
                   {"entity_types": gazetteer.types, "task": "typing", "layer": layer})
    with open(run.path("probes", "sweep.csv"), "w") as f:
        f.write("layer,dev_metric\n")
        for layer, score in enumerate(result.scores):
            f.write(f"{layer},{score:.6f}\n")
    run.update_pipeline_config(layer=result.best_layer)
    print("layer sweep:", " ".join(f"l{l}={s:.4f}" for l, s in enumerate(result.scores)))
    print(f"best layer: {result.best_layer}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "eval"))
    run = RunDir(args.run)
    pipeline = run.load_pipeline()
    split = cfg.get("split", "test")
    corpus_kind = cfg.get("corpus", "synthetic")
    prefix = "generated_" if corpus_kind == "generated" else ""
    docs = load_docs(run.require("corpus", f"{prefix}{split}.jsonl"))
    run.path("reports").mkdir(parents=True, exist_ok=True)

    if args.fewshot:
        gazetteer = run.load_gazetteer()
        pool = load_docs(run.require("corpus", "train.jsonl"))
        ks = tuple(int(k) for k in str(cfg.get("ks", "1,5,10,50")).split(","))
        result = run_fewshot_episodes(
            pool, docs[: int(cfg.get("fewshot_eval_docs", 20))],
            pipeline.model, pipeline.vocab, gazetteer.types,
            ks=ks, episodes=int(cfg.get("episodes", 20)),
            seed=int(cfg.get("seed", 0)),
        )
        out = run.path("reports", "fewshot.json")
        out.write_text(json.dumps({str(k): v for k, v in result.items()}, indent=2))
        for k in ks:
            print(f"{k}-shot mean F1: {result[k]:.4f}")
        return 0

    report = evaluate_pipeline(docs, pipeline, strategies=tuple(STRATEGIES))
    report.to_csv(run.path("reports", f"eval_{split}.csv"))
    report.to_json(run.path("reports", f"eval_{split}.json"))
    print(f"{'strategy':<24} {'P':>8} {'R':>8} {'F1':>8} {'MD-F1':>8}")
    for row in report.rows:
        print(f"{row.strategy:<24} {row.ner.precision:>8.4f} {row.ner.recall:>8.4f} "
              f"{row.ner.f1:>8.4f} {row.mention_detection.f1:>8.4f}")
    print(f"entity typing (gold spans): F1 {report.entity_typing.f1:.4f}")
    return 0


def _cmd_stream(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "stream"))
    prompt_text = cfg.get("prompt")
    if not prompt_text:
        raise UsageError("--prompt is required")
    run = RunDir(args.run)
    overrides = {}
    if cfg.get("max_new") is not None:
        overrides["decode"] = {
            "max_new_tokens": int(cfg.get("max_new")),
            "repetition_penalty": float(cfg.get("repetition_penalty", 1.2)),
        }
    if cfg.get("strategy"):
        overrides["strategy"] = cfg.get("strategy")
    pipeline = run.load_pipeline(overrides)
    prompt = pipeline.vocab.encode(prompt_text)
    state, events = pipeline.init_stream(prompt)
    words = [pipeline.vocab.piece(t) for t in state.tokens]
    for ev in events:
        print(json.dumps(event_to_json(ev, words)))
    while not state.finished:
        state, ev = pipeline.step(state)
        words = [pipeline.vocab.piece(t) for t in state.tokens]
        print(json.dumps(event_to_json(ev, words)))
    return 0


def _cmd_bench(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "bench"))
    run = RunDir(args.run)
    pipeline = run.load_pipeline()
    lengths = [int(x) for x in str(cfg.get("lengths", "32,64,128")).split(",")]
    docs = load_docs(run.require("corpus", "dev.jsonl"))
    n_prompts = int(cfg.get("prompts", 3))
    prompts = [d.token_ids(pipeline.vocab) for d in docs[:n_prompts]]
    report = run_bench(pipeline, prompts, lengths=lengths,
                       reps=int(cfg.get("reps", 5)), warmup=int(cfg.get("warmup", 2)))
    run.path("reports").mkdir(parents=True, exist_ok=True)
    report.to_json(run.path("reports", "bench.json"))
    print(report.pretty_table())
    if not report.spans_equal:
        print("WARNING: streaming and re-run spans disagreed", file=sys.stderr)
    return 0


def _cmd_serve(args) -> int:
    cfg = _Resolver(args, _load_config_file(args.config, "serve"))
    run = RunDir(args.run)
    pipeline = run.load_pipeline()
    service_cfg = ServiceConfig(
        host=cfg.get("host", "127.0.0.1"),
        port=int(cfg.get("port", 8756)),
        max_streams=int(cfg.get("max_streams", 4)),
        frontend_dist=cfg.get("frontend"),
    )
    serve(pipeline, service_cfg)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tapner", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    def add(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--run", default="runs/default", help="run directory")
        p.add_argument("--config", default=None, help="JSON or TOML config file")
        p.set_defaults(handler=handler)
        return p

    p = add("datagen", _cmd_datagen, help="generate the synthetic corpus (or distill)")
    p.add_argument("--n-docs", dest="n_docs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
    p.add_argument("--gazetteer", default=None, help="path to a gazetteer JSON")
    p.add_argument("--distill", action="store_true",
                   help="generate LM continuations and teacher-label them")
    p.add_argument("--distill-new-tokens", dest="distill_new_tokens", type=int, default=None)

    p = add("train", _cmd_train, help="train the LM or a probe")
    p.add_argument("--task", required=True, choices=("lm", "typing", "span", "adjacency"))
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--corpus", choices=("synthetic", "generated"), default=None)
    p.add_argument("--variant", choices=("span_next", "span_last"), default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="probe learning rate")
    p.add_argument("--batch", type=int, default=None, help="probe batch size")
    p.add_argument("--n-neurons", dest="n_neurons", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="LM training steps")
    p.add_argument("--lm-batch", dest="lm_batch", type=int, default=None)
    p.add_argument("--lm-lr", dest="lm_lr", type=float, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", action="store_true", help="grid-search lr x batch")

    p = add("sweep", _cmd_sweep, help="train a typing probe per tap point, pick the best")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--n-neurons", dest="n_neurons", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("eval", _cmd_eval, help="evaluate all strategies on a split")
    p.add_argument("--split", choices=("train", "dev", "test"), default=None)
    p.add_argument("--corpus", choices=("synthetic", "generated"), default=None)
    p.add_argument("--fewshot", action="store_true")
    p.add_argument("--ks", default=None, help="comma-separated k values")
    p.add_argument("--episodes", type=int, default=None)

    p = add("stream", _cmd_stream, help="annotated generation, NDJSON events on stdout")
    p.add_argument("--prompt", default=None)
    p.add_argument("--max-new", dest="max_new", type=int, default=None)
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--repetition-penalty", dest="repetition_penalty",
                   type=float, default=None)

    p = add("bench", _cmd_bench, help="latency benchmark across modes and lengths")
    p.add_argument("--lengths", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)

    p = add("serve", _cmd_serve, help="run the HTTP/SSE service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--max-streams", dest="max_streams", type=int, default=None)
    p.add_argument("--frontend", default=None, help="built playground dist directory")

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (TapnerError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
