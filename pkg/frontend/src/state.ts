// Event-sourced session state: the rendered view is a pure fold over the
// received stream events, so replaying a recorded stream reproduces the
// exact same view. No classification logic lives here; the server's diffs
// are applied verbatim.

import type { DonePayload, SpanJson, StreamEventJson } from "./types.js";

export interface TokenCell {
  id: number;
  text: string;
  tokenwise: string;
}

export interface EntityCell {
  span: SpanJson;
  revisions: number; // times this boundary was retyped
}

export interface LogLine {
  step: number;
  message: string;
  kind: "event" | "revision" | "error";
}

export interface SessionState {
  tokens: TokenCell[];
  entities: Map<string, EntityCell>;
  log: LogLine[];
  running: boolean;
  error: string | null;
  done: DonePayload | null;
  lastTouched: Set<string>; // boundaries changed by the latest event
}

export function initialState(): SessionState {
  return {
    tokens: [],
    entities: new Map(),
    log: [],
    running: false,
    error: null,
    done: null,
    lastTouched: new Set(),
  };
}

const key = (s: { start: number; end: number }) => `${s.start}-${s.end}`;

function isValidEvent(data: unknown): data is StreamEventJson {
  if (typeof data !== "object" || data === null) return false;
  const e = data as Record<string, unknown>;
  return (
    typeof e.step === "number" &&
    typeof e.token === "object" &&
    e.token !== null &&
    typeof e.tokenwise === "string" &&
    Array.isArray(e.added) &&
    Array.isArray(e.retracted) &&
    Array.isArray(e.retyped)
  );
}

/** Apply one stream event. Returns a new state; the input is not mutated. */
export function applyEvent(state: SessionState, data: unknown): SessionState {
  if (!isValidEvent(data)) {
    return {
      ...state,
      log: [
        ...state.log,
        { step: -1, message: "skipped malformed event", kind: "error" },
      ],
    };
  }
  const entities = new Map(state.entities);
  const touched = new Set<string>();
  const log = [...state.log];

  for (const span of data.retracted) {
    entities.delete(key(span));
    touched.add(key(span));
    log.push({
      step: data.step,
      message: `retracted ${span.type} "${span.text}"`,
      kind: "revision",
    });
  }
  for (const r of data.retyped) {
    const prev = entities.get(key(r));
    entities.set(key(r), {
      span: r,
      revisions: (prev?.revisions ?? 0) + 1,
    });
    touched.add(key(r));
    log.push({
      step: data.step,
      message: `retyped "${r.text}": ${r.old_type} -> ${r.type}`,
      kind: "revision",
    });
  }
  for (const span of data.added) {
    entities.set(key(span), {
      span,
      revisions: entities.get(key(span))?.revisions ?? 0,
    });
    touched.add(key(span));
    log.push({
      step: data.step,
      message: `added ${span.type} "${span.text}"`,
      kind: "event",
    });
  }

  return {
    ...state,
    tokens: [
      ...state.tokens,
      { id: data.token.id, text: data.token.text, tokenwise: data.tokenwise },
    ],
    entities,
    log,
    lastTouched: touched,
  };
}

export function markRunning(state: SessionState): SessionState {
  return { ...initialState(), running: true };
}

export function markDone(state: SessionState, payload: DonePayload): SessionState {
  return { ...state, running: false, done: payload, lastTouched: new Set() };
}

export function markError(state: SessionState, message: string): SessionState {
  // Keep the partial transcript; just surface the banner and stop.
  return {
    ...state,
    running: false,
    error: message,
    log: [...state.log, { step: -1, message, kind: "error" }],
  };
}

/** Final (start, end, type) triples of the folded view. */
export function foldedEntities(state: SessionState): Array<[number, number, string]> {
  return [...state.entities.values()]
    .map((e): [number, number, string] => [e.span.start, e.span.end, e.span.type])
    .sort((a, b) => a[0] - b[0]);
}

/** Replay a full recorded stream from scratch. */
export function replay(events: unknown[]): SessionState {
  let state = initialState();
  for (const ev of events) state = applyEvent(state, ev);
  return state;
}
