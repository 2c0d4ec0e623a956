// Server-sent-events over fetch (the stream endpoint is a POST, so the
// built-in EventSource does not apply). The parser is incremental and
// chunk-boundary safe.

export interface SseMessage {
  event: string;
  data: string;
}

/** Incremental SSE parser: feed chunks, collect complete messages. */
export class SseParser {
  private buffer = "";

  push(chunk: string): SseMessage[] {
    this.buffer += chunk;
    const messages: SseMessage[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      let event = "message";
      const dataLines: string[] = [];
      for (const line of block.split("\n")) {
        if (line.startsWith("event: ")) event = line.slice(7).trim();
        else if (line.startsWith("event:")) event = line.slice(6).trim();
        else if (line.startsWith("data: ")) dataLines.push(line.slice(6));
        else if (line.startsWith("data:")) dataLines.push(line.slice(5));
      }
      if (dataLines.length > 0) {
        messages.push({ event, data: dataLines.join("\n") });
      }
    }
    return messages;
  }
}

export interface StreamCallbacks {
  onEvent: (payload: unknown) => void;
  onDone: (payload: unknown) => void;
  onError: (message: string) => void;
}

/** Open the annotated-generation stream and dispatch parsed messages. */
export async function streamAnnotated(
  baseUrl: string,
  prompt: string,
  params: Record<string, unknown>,
  callbacks: StreamCallbacks,
  fetchImpl: typeof fetch = fetch,
): Promise<void> {
  let response: Response;
  try {
    response = await fetchImpl(`${baseUrl}/v1/stream`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ prompt, params }),
    });
  } catch (err) {
    callbacks.onError(`connection failed: ${String(err)}`);
    return;
  }
  if (!response.ok) {
    let detail = `${response.status}`;
    try {
      const body = (await response.json()) as { error?: string };
      if (body.error) detail = `${response.status}: ${body.error}`;
    } catch {
      // non-JSON error body; keep the status code
    }
    callbacks.onError(detail);
    return;
  }
  if (!response.body) {
    callbacks.onError("response has no body");
    return;
  }
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  let sawDone = false;
  try {
    for (;;) {
      const { value, done } = await reader.read();
      if (done) break;
      for (const msg of parser.push(decoder.decode(value, { stream: true }))) {
        let payload: unknown;
        try {
          payload = JSON.parse(msg.data);
        } catch {
          callbacks.onError("malformed event payload");
          continue;
        }
        if (msg.event === "done") {
          sawDone = true;
          callbacks.onDone(payload);
        } else if (msg.event === "error") {
          const p = payload as { error?: string };
          callbacks.onError(p.error ?? "server error");
        } else {
          callbacks.onEvent(payload);
        }
      }
    }
    if (!sawDone) {
      callbacks.onError("connection closed before the stream finished");
    }
  } catch (err) {
    callbacks.onError(`connection lost: ${String(err)}`);
  }
}
