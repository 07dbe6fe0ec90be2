/** Server-sent-events client on fetch streams (works in browsers and node),
 * with automatic reconnect that resumes from the last seen sequence number. */

export interface ConsoleEvent {
  seq: number;
  type: "state_changed" | "macro_proposal" | "episode_finished";
  payload: Record<string, unknown>;
}

/** Parse one SSE frame body ("data: ..." lines) into an event. */
export function parseFrame(frame: string): ConsoleEvent | null {
  let data = "";
  for (const line of frame.split("\n")) {
    if (line.startsWith("data:")) data += line.slice(5).trim();
  }
  if (!data) return null;
  return JSON.parse(data) as ConsoleEvent;
}

export async function* readEvents(
  url: string,
  signal?: AbortSignal,
): AsyncGenerator<ConsoleEvent> {
  const res = await fetch(url, { signal, headers: { accept: "text/event-stream" } });
  if (!res.ok || !res.body) throw new Error(`event stream failed: ${res.status}`);
  const reader = res.body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  for (;;) {
    const { done, value } = await reader.read();
    if (done) return;
    buffer += decoder.decode(value, { stream: true });
    let cut;
    while ((cut = buffer.indexOf("\n\n")) >= 0) {
      const frame = buffer.slice(0, cut);
      buffer = buffer.slice(cut + 2);
      if (frame.startsWith(":")) continue; // keepalive comment
      const event = parseFrame(frame);
      if (event) yield event;
    }
  }
}

export interface StreamHandle {
  close(): void;
}

/** Subscribe with resume-on-drop. Events are delivered in seq order; frames
 * at or below the cursor (possible after a reconnect race) are dropped. */
export function connectEvents(
  urlFor: (after: number) => string,
  onEvent: (e: ConsoleEvent) => void,
  opts: { after?: number; onClose?: () => void; retryMs?: number } = {},
): StreamHandle {
  let cursor = opts.after ?? 0;
  let closed = false;
  const controller = { current: new AbortController() };

  const loop = async () => {
    let backoff = opts.retryMs ?? 500;
    while (!closed) {
      try {
        for await (const event of readEvents(urlFor(cursor), controller.current.signal)) {
          if (event.seq <= cursor) continue;
          cursor = event.seq;
          backoff = opts.retryMs ?? 500;
          onEvent(event);
        }
        // clean end of stream: session finished
        if (!closed && opts.onClose) opts.onClose();
        return;
      } catch (err) {
        if (closed) return;
        await new Promise((r) => setTimeout(r, backoff));
        backoff = Math.min(backoff * 2, 10_000);
        controller.current = new AbortController();
      }
    }
  };
  void loop();
  return {
    close() {
      closed = true;
      controller.current.abort();
    },
  };
}
