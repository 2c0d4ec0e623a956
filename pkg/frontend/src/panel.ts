// Parameter panel: reading, validating, and defaulting generation settings.
// Edits apply to the *next* run; the active stream is never reconfigured.

import type { GenerationParams, MetaPayload } from "./types.js";

export interface ValidationError {
  field: string;
  message: string;
}

export function validateParams(p: GenerationParams): ValidationError[] {
  const errors: ValidationError[] = [];
  const unit = (name: string, v: number) => {
    if (!(v >= 0 && v <= 1)) errors.push({ field: name, message: "must be in [0, 1]" });
  };
  unit("span_threshold", p.span_threshold);
  unit("adjacency_threshold", p.adjacency_threshold);
  if (!Number.isInteger(p.window) || p.window < 1) {
    errors.push({ field: "window", message: "must be an integer >= 1" });
  }
  if (!Number.isInteger(p.max_new_tokens) || p.max_new_tokens < 0) {
    errors.push({ field: "max_new_tokens", message: "must be an integer >= 0" });
  }
  if (!(p.repetition_penalty >= 1)) {
    errors.push({ field: "repetition_penalty", message: "must be >= 1" });
  }
  return errors;
}

export function defaultsFromMeta(meta: MetaPayload): GenerationParams {
  const d = meta.defaults;
  return {
    strategy: d.strategy,
    variant: d.variant,
    span_threshold: d.span_threshold,
    adjacency_threshold: d.adjacency_threshold,
    window: d.window,
    max_new_tokens: d.max_new_tokens,
    repetition_penalty: d.repetition_penalty,
    layer: d.layer,
  };
}

export function readPanel(form: HTMLElement): GenerationParams {
  const num = (id: string) =>
    Number((form.querySelector(`#${id}`) as HTMLInputElement).value);
  const str = (id: string) =>
    (form.querySelector(`#${id}`) as HTMLSelectElement).value;
  return {
    strategy: str("strategy"),
    variant: str("variant"),
    span_threshold: num("span_threshold"),
    adjacency_threshold: num("adjacency_threshold"),
    window: num("window"),
    max_new_tokens: num("max_new_tokens"),
    repetition_penalty: num("repetition_penalty"),
  };
}

export function writePanel(form: HTMLElement, params: GenerationParams,
                           meta: MetaPayload): void {
  const fill = (id: string, options: string[], value: string) => {
    const select = form.querySelector(`#${id}`) as HTMLSelectElement;
    select.innerHTML = "";
    for (const opt of options) {
      const el = document.createElement("option");
      el.value = opt;
      el.textContent = opt;
      select.appendChild(el);
    }
    select.value = value;
  };
  fill("strategy", meta.strategies, params.strategy);
  fill("variant", meta.span_variants, params.variant);
  const set = (id: string, v: number) => {
    (form.querySelector(`#${id}`) as HTMLInputElement).value = String(v);
  };
  set("span_threshold", params.span_threshold);
  set("adjacency_threshold", params.adjacency_threshold);
  set("window", params.window);
  set("max_new_tokens", params.max_new_tokens);
  set("repetition_penalty", params.repetition_penalty);
}
