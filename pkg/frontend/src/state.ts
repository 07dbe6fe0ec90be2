/** View-state reducer: the page state is a pure fold over the event stream,
 * applied strictly in sequence order. */

import type { ConsoleEvent } from "./sse.js";
import type { GridState, Metrics } from "./api.js";

export interface ViewState {
  seq: number;
  phase: "connecting" | "awaiting_override" | "stepping" | "finished";
  grid: GridState | null;
  proposal: string | null;
  episode: number;
  stepsThisEpisode: number;
  interventionsThisEpisode: number;
  metrics: Metrics;
  lastResult: { episode: number; success: boolean; aborted: boolean } | null;
}

export function initialView(): ViewState {
  return {
    seq: 0,
    phase: "connecting",
    grid: null,
    proposal: null,
    episode: 0,
    stepsThisEpisode: 0,
    interventionsThisEpisode: 0,
    metrics: {
      episodes_completed: 0,
      tc_percent: 0,
      avg_hi: 0,
      interventions_total: 0,
      interventions_this_episode: 0,
    },
    lastResult: null,
  };
}

export class OutOfOrderEvent extends Error {}

export function applyEvent(view: ViewState, event: ConsoleEvent): ViewState {
  if (event.seq <= view.seq) {
    throw new OutOfOrderEvent(`seq ${event.seq} after ${view.seq}`);
  }
  const next: ViewState = { ...view, seq: event.seq };
  if (event.type === "state_changed") {
    const grid = event.payload as unknown as GridState;
    next.grid = grid;
    next.phase = "stepping";
    next.episode = grid.episode;
    next.stepsThisEpisode = grid.t;
    next.proposal = null;
  } else if (event.type === "macro_proposal") {
    next.proposal = String(event.payload.instruction);
    next.phase = "awaiting_override";
    next.episode = Number(event.payload.episode);
  } else {
    const p = event.payload as Record<string, unknown>;
    next.lastResult = {
      episode: Number(p.episode),
      success: Boolean(p.success),
      aborted: Boolean(p.aborted),
    };
    next.metrics = {
      episodes_completed: Number(p.episodes_completed ?? 0),
      tc_percent: Number(p.tc_percent ?? 0),
      avg_hi: Number(p.avg_hi ?? 0),
      interventions_total: Number(p.interventions_total ?? 0),
      interventions_this_episode: 0,
    };
    next.interventionsThisEpisode = 0;
    next.stepsThisEpisode = 0;
    next.phase = p.session_complete ? "finished" : next.phase;
  }
  return next;
}

/** Client-side intervention bump, mirrored by the server metrics. */
export function noteOverride(view: ViewState, intervened: boolean): ViewState {
  if (!intervened) return view;
  return {
    ...view,
    interventionsThisEpisode: view.interventionsThisEpisode + 1,
    metrics: {
      ...view.metrics,
      interventions_total: view.metrics.interventions_total + 1,
    },
  };
}
