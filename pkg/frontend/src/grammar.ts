/** The closed instruction language: 6 colors x 2 color templates + 1. */

export const COLORS = ["red", "green", "blue", "purple", "yellow", "grey"] as const;
export type Color = (typeof COLORS)[number];

export type GoalKind = "open_door" | "pick_up_key" | "go_to_goal";

export function normalize(text: string): string {
  return text.toLowerCase().split(/\s+/).filter(Boolean).join(" ");
}

export function buildInstruction(kind: GoalKind, color?: Color): string {
  if (kind === "open_door") return `open the ${color} door`;
  if (kind === "pick_up_key") return `pick up the ${color} key`;
  return "go to the goal";
}

export function allInstructions(): string[] {
  const out: string[] = [];
  for (const c of COLORS) out.push(buildInstruction("open_door", c));
  for (const c of COLORS) out.push(buildInstruction("pick_up_key", c));
  out.push(buildInstruction("go_to_goal"));
  return out;
}

/** Exact-template validation after normalization (mirrors the server). */
export function isGrammatical(text: string): boolean {
  const words = normalize(text).split(" ");
  if (words.length === 4 && words[0] === "open" && words[1] === "the" && words[3] === "door") {
    return (COLORS as readonly string[]).includes(words[2]);
  }
  if (
    words.length === 5 &&
    words[0] === "pick" &&
    words[1] === "up" &&
    words[2] === "the" &&
    words[4] === "key"
  ) {
    return (COLORS as readonly string[]).includes(words[3]);
  }
  return normalize(text) === "go to the goal";
}
