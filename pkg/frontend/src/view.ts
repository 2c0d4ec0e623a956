// Pure view-model: maps session state to renderable cells so the DOM layer
// stays a dumb template and the interesting logic stays testable.

import type { SessionState } from "./state.js";

export type ViewMode = "final" | "tokenwise";

export interface TokenView {
  text: string;
  type: string | null; // entity type coloring the token, if any
  flash: boolean;      // part of the most recent revision
  provisional: boolean; // tokenwise non-O with no final span (yet)
}

export interface EntityView {
  text: string;
  type: string;
  start: number;
  end: number;
  score: number;
  revisions: number;
}

const PALETTE = [
  "c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7",
];

export function typeClass(type: string, types: string[]): string {
  const idx = types.indexOf(type);
  return PALETTE[(idx >= 0 ? idx : types.length) % PALETTE.length] as string;
}

function labelType(label: string): string | null {
  return label === "O" ? null : label.slice(2);
}

export function tokenViews(state: SessionState, mode: ViewMode): TokenView[] {
  const byPosition = new Map<number, { type: string; key: string }>();
  for (const [k, cell] of state.entities) {
    for (let i = cell.span.start; i <= cell.span.end; i++) {
      byPosition.set(i, { type: cell.span.type, key: k });
    }
  }
  return state.tokens.map((tok, i) => {
    const final = byPosition.get(i) ?? null;
    const tokenwise = labelType(tok.tokenwise);
    const type = mode === "final" ? (final?.type ?? null) : tokenwise;
    return {
      text: tok.text,
      type,
      flash: final !== null && state.lastTouched.has(final.key),
      provisional: mode === "final" && final === null && tokenwise !== null,
    };
  });
}

export function entityViews(state: SessionState): EntityView[] {
  return [...state.entities.values()]
    .map((cell) => ({
      text: cell.span.text,
      type: cell.span.type,
      start: cell.span.start,
      end: cell.span.end,
      score: cell.span.score,
      revisions: cell.revisions,
    }))
    .sort((a, b) => a.start - b.start);
}
