/** Canvas grid renderer: cells colored by kind, door states visually
 * distinct, agent drawn as an oriented triangle. Pure function of the
 * snapshot grid; no client-side simulation. */

import type { GridState } from "./api.js";

export const CELL_PX = 32;

const KIND = { empty: 0, wall: 1, door: 2, key: 3, goal: 4, agent: 5 } as const;

export const COLOR_HEX: Record<number, string> = {
  0: "#d64545", // red
  1: "#3fa34d", // green
  2: "#3d6fd6", // blue
  3: "#8e44ad", // purple
  4: "#d6b534", // yellow
  5: "#9aa0a6", // grey
};

const FLOOR = "#101418";
const WALL = "#3c4043";
const GOAL = "#1e8e3e";

export interface Ctx2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  fill(): void;
  stroke(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
}

export function gridSize(state: GridState): { w: number; h: number } {
  return { w: state.grid.length, h: state.grid[0].length };
}

export function renderGrid(ctx: Ctx2D, state: GridState): void {
  const { w, h } = gridSize(state);
  ctx.fillStyle = FLOOR;
  ctx.fillRect(0, 0, w * CELL_PX, h * CELL_PX);
  for (let x = 0; x < w; x++) {
    for (let y = 0; y < h; y++) {
      drawCell(ctx, x, y, state.grid[x][y]);
    }
  }
}

function drawCell(ctx: Ctx2D, x: number, y: number, cell: number[]): void {
  const [kind, color, extra] = cell;
  const px = x * CELL_PX;
  const py = y * CELL_PX;
  if (kind === KIND.wall) {
    ctx.fillStyle = WALL;
    ctx.fillRect(px, py, CELL_PX, CELL_PX);
  } else if (kind === KIND.goal) {
    ctx.fillStyle = GOAL;
    ctx.fillRect(px + 1, py + 1, CELL_PX - 2, CELL_PX - 2);
  } else if (kind === KIND.door) {
    drawDoor(ctx, px, py, COLOR_HEX[color] ?? "#fff", extra);
  } else if (kind === KIND.key) {
    drawKey(ctx, px, py, COLOR_HEX[color] ?? "#fff");
  } else if (kind === KIND.agent) {
    drawAgent(ctx, px, py, extra % 4, extra >= 4 ? Math.floor(extra / 4) - 1 : null);
  }
}

function drawDoor(ctx: Ctx2D, px: number, py: number, hex: string, state: number): void {
  ctx.strokeStyle = hex;
  ctx.lineWidth = 2;
  ctx.strokeRect(px + 2, py + 2, CELL_PX - 4, CELL_PX - 4);
  if (state === 0) return; // open: outline only
  ctx.fillStyle = hex;
  ctx.fillRect(px + 4, py + 4, CELL_PX - 8, CELL_PX - 8);
  if (state === 2) {
    // locked: keyhole glyph
    ctx.fillStyle = FLOOR;
    ctx.beginPath();
    ctx.arc(px + CELL_PX / 2, py + CELL_PX / 2 - 3, 4, 0, Math.PI * 2);
    ctx.fill();
    ctx.fillRect(px + CELL_PX / 2 - 2, py + CELL_PX / 2 - 1, 4, 10);
  }
}

function drawKey(ctx: Ctx2D, px: number, py: number, hex: string): void {
  ctx.strokeStyle = hex;
  ctx.lineWidth = 3;
  ctx.beginPath();
  ctx.arc(px + CELL_PX / 2 - 5, py + CELL_PX / 2, 5, 0, Math.PI * 2);
  ctx.stroke();
  ctx.fillStyle = hex;
  ctx.fillRect(px + CELL_PX / 2, py + CELL_PX / 2 - 1, 12, 3);
  ctx.fillRect(px + CELL_PX / 2 + 8, py + CELL_PX / 2 + 1, 3, 5);
}

/** dir: 0 north, 1 east, 2 south, 3 west; triangle points along dir. */
function drawAgent(ctx: Ctx2D, px: number, py: number, dir: number, carried: number | null): void {
  const c = CELL_PX / 2;
  const r = CELL_PX / 2 - 5;
  const points: Record<number, number[][]> = {
    0: [[c, c - r], [c - r, c + r], [c + r, c + r]],
    1: [[c + r, c], [c - r, c - r], [c - r, c + r]],
    2: [[c, c + r], [c - r, c - r], [c + r, c - r]],
    3: [[c - r, c], [c + r, c - r], [c + r, c + r]],
  };
  ctx.fillStyle = "#e8eaed";
  ctx.beginPath();
  const [p0, p1, p2] = points[dir];
  ctx.moveTo(px + p0[0], py + p0[1]);
  ctx.lineTo(px + p1[0], py + p1[1]);
  ctx.lineTo(px + p2[0], py + p2[1]);
  ctx.closePath();
  ctx.fill();
  if (carried !== null) {
    ctx.fillStyle = COLOR_HEX[carried] ?? "#fff";
    ctx.fillRect(px + CELL_PX - 10, py + 2, 8, 8);
  }
}
