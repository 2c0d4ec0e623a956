// Wire formats, matching the service's /v1 endpoints exactly.

export interface SpanJson {
  start: number;
  end: number;
  type: string;
  score: number;
  text: string;
}

export interface RetypedJson extends SpanJson {
  old_type: string;
}

export interface StreamEventJson {
  step: number;
  token: { id: number; text: string };
  tokenwise: string;
  added: SpanJson[];
  retracted: SpanJson[];
  retyped: RetypedJson[];
}

export interface DonePayload {
  text: string;
  tokens: string[];
  entities: SpanJson[];
}

export interface MetaPayload {
  entity_types: string[];
  labels: string[];
  strategies: string[];
  span_variants: string[];
  typing_layers: number[];
  defaults: GenerationParams & { layer: number };
  limits: { max_context: number; max_streams: number };
  model: { n_params: number; config: Record<string, number> };
}

export interface GenerationParams {
  strategy: string;
  variant: string;
  span_threshold: number;
  adjacency_threshold: number;
  window: number;
  max_new_tokens: number;
  repetition_penalty: number;
  layer?: number;
}
