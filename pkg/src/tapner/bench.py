"""Latency benchmark: generation alone vs incremental NER vs re-run baseline.

Three modes over the same greedy transcripts:

* ``generation_only``: KV-cached decoding, no annotation.
* ``streaming``: decoding plus the incremental annotator (one typing probe
  and O(window) span probes per token).
* ``rerun_baseline``: decoding plus a from-scratch re-annotation of the full
  current text after every token (a second full forward pass and probes over
  all positions), the desk-scale stand-in for calling an external tagger.

Timing uses a monotonic clock, excludes tokenization and I/O, and reports
mean, stdev, and median over repetitions run after warmup rounds.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .model.decoding import pick_next_token
from .streaming import Pipeline

log = logging.getLogger(__name__)

MODE_GENERATION = "generation_only"
MODE_STREAMING = "streaming"
MODE_RERUN = "rerun_baseline"
MODES = (MODE_GENERATION, MODE_STREAMING, MODE_RERUN)


@dataclass
class BenchCell:
    mode: str
    length: int
    ms_per_token_mean: float
    ms_per_token_stdev: float
    ms_per_token_median: float
    tokens_per_s: float
    delta_abs_ms: float | None = None
    delta_rel: float | None = None

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "length": self.length,
            "ms_per_token_mean": self.ms_per_token_mean,
            "ms_per_token_stdev": self.ms_per_token_stdev,
            "ms_per_token_median": self.ms_per_token_median,
            "tokens_per_s": self.tokens_per_s,
            "delta_abs_ms": self.delta_abs_ms,
            "delta_rel": self.delta_rel,
        }


@dataclass
class BenchReport:
    lengths: list[int]
    reps: int
    warmup: int
    cells: dict = field(default_factory=dict)
    spans_equal: bool = True
    single_rep_warning: bool = False

    def cell(self, mode: str, length: int) -> BenchCell:
        return self.cells[(mode, length)]

    def to_json(self, path: str | Path | None = None) -> dict:
        data = {
            "lengths": self.lengths,
            "reps": self.reps,
            "warmup": self.warmup,
            "spans_equal": self.spans_equal,
            "single_rep_warning": self.single_rep_warning,
            "cells": [c.as_dict() for c in self.cells.values()],
        }
        if path is not None:
            Path(path).write_text(json.dumps(data, indent=2))
        return data

    def pretty_table(self) -> str:
        lines = [
            f"{'mode':<18} {'len':>5} {'ms/token':>10} {'stdev':>8} "
            f"{'median':>8} {'tok/s':>8} {'d_abs':>8} {'d_rel':>8}"
        ]
        for length in self.lengths:
            for mode in MODES:
                c = self.cell(mode, length)
                d_abs = f"{c.delta_abs_ms:+.2f}" if c.delta_abs_ms is not None else "-"
                d_rel = f"{c.delta_rel * 100:+.1f}%" if c.delta_rel is not None else "-"
                lines.append(
                    f"{c.mode:<18} {c.length:>5} {c.ms_per_token_mean:>10.3f} "
                    f"{c.ms_per_token_stdev:>8.3f} {c.ms_per_token_median:>8.3f} "
                    f"{c.tokens_per_s:>8.1f} {d_abs:>8} {d_rel:>8}"
                )
        return "\n".join(lines)


def _generation_only(pipeline: Pipeline, prompt: list[int], n_new: int) -> list[int]:
    model = pipeline.model
    cache = model.init_cache(len(prompt) + n_new)
    tokens = list(prompt)
    logits = None
    for t in prompt:
        logits, _, _, cache = model.decode_step(cache, t)
    for _ in range(n_new):
        nxt = pick_next_token(logits, set(tokens), pipeline.cfg.decode)
        tokens.append(nxt)
        logits, _, _, cache = model.decode_step(cache, nxt)
    return tokens


def _streaming(pipeline: Pipeline, prompt: list[int], n_new: int):
    result = pipeline.run_stream(prompt, max_new_tokens=n_new)
    return result.tokens, result.entities


def _rerun_baseline(pipeline: Pipeline, prompt: list[int], n_new: int):
    model = pipeline.model
    cache = model.init_cache(len(prompt) + n_new)
    tokens = list(prompt)
    logits = None
    for t in prompt:
        logits, _, _, cache = model.decode_step(cache, t)
    entities = pipeline.annotate_tokens(tokens)
    for _ in range(n_new):
        nxt = pick_next_token(logits, set(tokens), pipeline.cfg.decode)
        tokens.append(nxt)
        logits, _, _, cache = model.decode_step(cache, nxt)
        entities = pipeline.annotate_tokens(tokens)
    return tokens, entities


def run_bench(
    pipeline: Pipeline,
    prompts: list[list[int]],
    lengths: list[int] = (32, 64, 128, 256),
    reps: int = 5,
    warmup: int = 2,
) -> BenchReport:
    """Measure all three modes across generation lengths."""
    if not prompts:
        raise ValueError("need at least one prompt")
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    max_prompt = max(len(p) for p in prompts)
    if max_prompt + lengths[-1] > pipeline.model.cfg.max_context:
        raise ValueError(
            f"prompt ({max_prompt}) + length ({lengths[-1]}) exceeds context "
            f"{pipeline.model.cfg.max_context}"
        )
    report = BenchReport(lengths=lengths, reps=reps, warmup=warmup,
                         single_rep_warning=reps == 1)
    if reps == 1:
        log.warning("reps=1: stdev will be reported as 0")

    runners = {
        MODE_GENERATION: lambda p, n: (_generation_only(pipeline, p, n), None),
        MODE_STREAMING: lambda p, n: _streaming(pipeline, p, n),
        MODE_RERUN: lambda p, n: _rerun_baseline(pipeline, p, n),
    }
    for length in lengths:
        base_mean = None
        for mode in MODES:
            runner = runners[mode]
            times_ms = []
            final = None
            for rep in range(warmup + reps):
                prompt = prompts[rep % len(prompts)]
                t0 = time.perf_counter()
                final = runner(prompt, length)
                dt = time.perf_counter() - t0
                if rep >= warmup:
                    times_ms.append(dt * 1000.0 / length)
            mean = statistics.fmean(times_ms)
            stdev = statistics.stdev(times_ms) if len(times_ms) > 1 else 0.0
            cell = BenchCell(
                mode=mode,
                length=length,
                ms_per_token_mean=mean,
                ms_per_token_stdev=stdev,
                ms_per_token_median=statistics.median(times_ms),
                tokens_per_s=1000.0 / mean,
            )
            if mode == MODE_GENERATION:
                base_mean = mean
            else:
                cell.delta_abs_ms = mean - base_mean
                cell.delta_rel = (mean - base_mean) / base_mean
            report.cells[(mode, length)] = cell
            log.info("bench %s len=%d: %.3f ms/token", mode, length, mean)
        # Same transcript (greedy is deterministic), so spans must agree.
        prompt = prompts[(warmup + reps - 1) % len(prompts)]
        _, stream_spans = _streaming(pipeline, prompt, length)
        _, rerun_spans = _rerun_baseline(pipeline, prompt, length)
        if [s.key() for s in stream_spans] != [s.key() for s in rerun_spans]:
            report.spans_equal = False
    return report
