import { applyEvent, initialState, markDone, markError, markRunning } from "./state.js";
import type { SessionState } from "./state.js";
import { streamAnnotated } from "./sse.js";
import { defaultsFromMeta, readPanel, validateParams, writePanel } from "./panel.js";
import { render } from "./render.js";
import type { DonePayload, MetaPayload } from "./types.js";
import type { ViewMode } from "./view.js";

const BASE = "";

async function boot(): Promise<void> {
  const $ = (id: string) => document.getElementById(id) as HTMLElement;
  const els = {
    tokens: $("tokens"),
    entities: $("entities"),
    log: $("log"),
    banner: $("banner"),
  };
  const generateBtn = $("generate") as HTMLButtonElement;
  const promptBox = $("prompt") as HTMLTextAreaElement;
  const panel = $("panel");
  const validation = $("validation");
  const modeToggle = $("mode") as HTMLSelectElement;

  let state: SessionState = initialState();
  let mode: ViewMode = "final";
  let types: string[] = [];

  const repaint = () => render(state, mode, types, els);

  let meta: MetaPayload;
  try {
    meta = (await fetch(`${BASE}/v1/meta`).then((r) => r.json())) as MetaPayload;
  } catch (err) {
    els.banner.textContent = `service unreachable: ${String(err)}`;
    els.banner.style.display = "block";
    return;
  }
  types = meta.entity_types;
  writePanel(panel, defaultsFromMeta(meta), meta);
  $("model-info").textContent =
    `${meta.model.n_params.toLocaleString()} params, ` +
    `${meta.typing_layers.length} typing probe(s), ` +
    `types: ${types.join(", ")}`;

  modeToggle.addEventListener("change", () => {
    mode = modeToggle.value as ViewMode;
    repaint();
  });

  generateBtn.addEventListener("click", async () => {
    const params = readPanel(panel);
    const errors = validateParams(params);
    validation.textContent = errors
      .map((e) => `${e.field}: ${e.message}`)
      .join("; ");
    if (errors.length > 0) return;
    const prompt = promptBox.value.trim();
    if (!prompt) {
      validation.textContent = "prompt: must not be empty";
      return;
    }
    generateBtn.disabled = true;
    state = markRunning(state);
    repaint();
    await streamAnnotated(
      BASE,
      prompt,
      params as unknown as Record<string, unknown>,
      {
        onEvent: (payload) => {
          state = applyEvent(state, payload);
          repaint();
        },
        onDone: (payload) => {
          state = markDone(state, payload as DonePayload);
          generateBtn.disabled = false;
          repaint();
        },
        onError: (message) => {
          state = markError(state, message);
          generateBtn.disabled = false;
          repaint();
        },
      },
    );
  });
}

boot();
