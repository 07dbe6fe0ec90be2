/** Console page wiring: create a session, follow its event stream, render
 * the grid, and submit accept/override decisions at macro boundaries. */

import { SessionApi, ApiError } from "./api.js";
import { connectEvents, type StreamHandle } from "./sse.js";
import { applyEvent, initialView, noteOverride, type ViewState } from "./state.js";
import { CELL_PX, gridSize, renderGrid } from "./renderer.js";
import { COLORS, buildInstruction, isGrammatical, type GoalKind } from "./grammar.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const api = new SessionApi("");
let view: ViewState = initialView();
let sessionId: string | null = null;
let stream: StreamHandle | null = null;

function setBanner(text: string, isError = false): void {
  const banner = $("banner");
  banner.textContent = text;
  banner.className = isError ? "error" : "";
}

function redraw(): void {
  if (view.grid) {
    const canvas = $("grid") as unknown as HTMLCanvasElement;
    const { w, h } = gridSize(view.grid);
    if (canvas.width !== w * CELL_PX) {
      canvas.width = w * CELL_PX;
      canvas.height = h * CELL_PX;
    }
    const ctx = canvas.getContext("2d");
    if (ctx) renderGrid(ctx, view.grid);
  }
  $("phase").textContent = view.phase;
  $("step").textContent = String(view.stepsThisEpisode);
  $("episode").textContent = String(view.episode);
  $("hi-episode").textContent = String(view.interventionsThisEpisode);
  $("hi-total").textContent = String(view.metrics.interventions_total);
  $("tc").textContent = (view.metrics.tc_percent * 100).toFixed(0) + "%";
  $("avg-hi").textContent = view.metrics.avg_hi.toFixed(2);
  $("episodes-done").textContent = String(view.metrics.episodes_completed);
  $("proposal").textContent = view.proposal ?? "-";
  const waiting = view.phase === "awaiting_override";
  ($("accept") as HTMLButtonElement).disabled = !waiting;
  ($("override") as HTMLButtonElement).disabled = !waiting;
  if (view.lastResult) {
    const r = view.lastResult;
    $("result").textContent = r.aborted
      ? `episode ${r.episode}: aborted`
      : `episode ${r.episode}: ${r.success ? "success" : "failure"}`;
  }
}

function pickerInstruction(): string {
  const kind = ($("kind") as HTMLSelectElement).value as GoalKind;
  const color = ($("color") as HTMLSelectElement).value as (typeof COLORS)[number];
  const free = ($("free-text") as HTMLInputElement).value.trim();
  return free ? free : buildInstruction(kind, kind === "go_to_goal" ? undefined : color);
}

async function submit(accept: boolean): Promise<void> {
  if (!sessionId) return;
  const body: { accept: boolean; instruction?: string } = { accept };
  if (!accept) {
    const instruction = pickerInstruction();
    if (!isGrammatical(instruction)) {
      setBanner(`not in the instruction language: "${instruction}"`, true);
      return;
    }
    body.instruction = instruction;
  }
  try {
    const res = await api.submitOverride(sessionId, body);
    view = noteOverride(view, res.intervened);
    setBanner(accept ? "accepted" : `override applied: ${res.applied}`);
    redraw();
  } catch (err) {
    setBanner(err instanceof ApiError ? err.message : String(err), true);
  }
}

async function start(): Promise<void> {
  stream?.close();
  view = initialView();
  try {
    const { id } = await api.createSession();
    sessionId = id;
    setBanner(`session ${id.slice(0, 8)}`);
    stream = connectEvents(
      (after) => api.eventsUrl(id, after),
      (event) => {
        view = applyEvent(view, event);
        redraw();
      },
      { onClose: () => setBanner("session finished") },
    );
  } catch (err) {
    setBanner(err instanceof ApiError ? err.message : String(err), true);
  }
}

function populatePicker(): void {
  const kind = $("kind") as HTMLSelectElement;
  for (const [value, label] of [
    ["open_door", "open the ... door"],
    ["pick_up_key", "pick up the ... key"],
    ["go_to_goal", "go to the goal"],
  ]) {
    const opt = document.createElement("option");
    opt.value = value;
    opt.textContent = label;
    kind.appendChild(opt);
  }
  const color = $("color") as HTMLSelectElement;
  for (const c of COLORS) {
    const opt = document.createElement("option");
    opt.value = c;
    opt.textContent = c;
    color.appendChild(opt);
  }
}

export function boot(): void {
  populatePicker();
  $("accept").addEventListener("click", () => void submit(true));
  $("override").addEventListener("click", () => void submit(false));
  $("new-session").addEventListener("click", () => void start());
  void start();
}

boot();
