// DOM rendering of the view model.

import type { SessionState } from "./state.js";
import { entityViews, tokenViews, typeClass, type ViewMode } from "./view.js";

export function render(
  state: SessionState,
  mode: ViewMode,
  types: string[],
  els: {
    tokens: HTMLElement;
    entities: HTMLElement;
    log: HTMLElement;
    banner: HTMLElement;
  },
): void {
  els.tokens.innerHTML = "";
  for (const tok of tokenViews(state, mode)) {
    const chip = document.createElement("span");
    chip.textContent = tok.text;
    chip.className = "token";
    if (tok.type) chip.classList.add("typed", typeClass(tok.type, types));
    if (tok.flash) chip.classList.add("flash");
    if (tok.provisional) chip.classList.add("provisional");
    if (tok.type) chip.title = tok.type;
    els.tokens.appendChild(chip);
  }

  els.entities.innerHTML = "";
  for (const ent of entityViews(state)) {
    const li = document.createElement("li");
    li.className = typeClass(ent.type, types);
    li.textContent =
      `${ent.type} (${ent.start}, ${ent.end}) "${ent.text}"` +
      (ent.revisions > 0 ? ` [retyped x${ent.revisions}]` : "");
    els.entities.appendChild(li);
  }

  els.log.innerHTML = "";
  for (const line of state.log.slice(-40)) {
    const li = document.createElement("li");
    li.className = line.kind;
    li.textContent = line.step >= 0 ? `[${line.step}] ${line.message}` : line.message;
    els.log.appendChild(li);
  }

  els.banner.textContent = state.error ?? "";
  els.banner.style.display = state.error ? "block" : "none";
}
