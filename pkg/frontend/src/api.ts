/** REST client for the session service. */

export interface Snapshot {
  id: string;
  phase: "awaiting_override" | "stepping" | "finished";
  seq: number;
  pending_instruction: string | null;
  config: unknown;
  state: GridState;
  metrics: Metrics;
}

export interface GridState {
  t: number;
  episode: number;
  grid: number[][][]; // [W][H][3] cell-kind / color / extra
  agent: { x: number; y: number; dir: number };
  carrying: string | null;
  done: boolean;
}

export interface Metrics {
  episodes_completed: number;
  tc_percent: number;
  avg_hi: number;
  interventions_total: number;
  interventions_this_episode: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, init);
  if (!res.ok) {
    const body = await res.text();
    throw new ApiError(res.status, `${res.status}: ${body}`);
  }
  if (res.status === 204) return undefined as T;
  return (await res.json()) as T;
}

export class SessionApi {
  constructor(private base: string) {}

  createSession(runtime?: unknown): Promise<{ id: string }> {
    return request(`${this.base}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(runtime === undefined ? {} : { runtime }),
    });
  }

  getState(id: string): Promise<Snapshot> {
    return request(`${this.base}/sessions/${id}`);
  }

  submitOverride(
    id: string,
    body: { accept: boolean; instruction?: string },
  ): Promise<{ applied: string; intervened: boolean; metrics: Metrics }> {
    return request(`${this.base}/sessions/${id}/override`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  deleteSession(id: string): Promise<void> {
    return request(`${this.base}/sessions/${id}`, { method: "DELETE" });
  }

  eventsUrl(id: string, after: number): string {
    return `${this.base}/sessions/${id}/events?after=${after}`;
  }
}
