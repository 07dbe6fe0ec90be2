"""Expert bot: symbolic sub-goal recommendation, BFS action planning, and
demonstration dataset generation.

The recommender recomputes from the current state every time it is asked, so
it stays consistent after arbitrary (legal) interventions. The action expert
plans over (cell, facing) nodes with a fixed expansion order
[forward, turn_left, turn_right] so plans, episodes, and datasets are
byte-reproducible.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import world
from .grammar import GO_TO_GOAL, GoalKind, Instruction, SubGoal, pick_up_key, open_door, render
from .world import (
    Action,
    CellKind,
    Direction,
    DIR_VEC,
    DoorState,
    EnvConfig,
    EnvState,
    find_path,
    observe,
    reachable_cells,
    reset,
    step,
    subgoal_satisfied,
)


class Unsolvable(RuntimeError):
    """The goal is no longer reachable under the transition rules."""


class Unreachable(RuntimeError):
    """The requested sub-goal cannot be achieved from this state."""


def next_subgoal(state: EnvState) -> SubGoal:
    """First unsatisfied prerequisite on the path to the goal.

    Order: next blocking unlocked door, then the goal-door key, then the
    locked goal door, then go_to_goal. Doors never re-close under the
    transition rules, but everything here is recomputed from scratch anyway.
    """
    if state.goal_pos in reachable_cells(state):
        return GO_TO_GOAL
    lx, ly = state.doors[state.locked_color]
    agent = (state.agent.x, state.agent.y)
    if state.grid[lx][ly].door_state is DoorState.OPEN:
        target, final = state.goal_pos, GO_TO_GOAL
    elif state.carrying == state.locked_color:
        target, final = (lx, ly), open_door(state.locked_color)
    elif state.key_color in state.keys_on_grid:
        target, final = state.keys_on_grid[state.key_color], pick_up_key(state.key_color)
    else:
        raise Unsolvable("goal key neither held nor on the grid")
    path = find_path(state, agent, target, through_closed=True)
    if path is None:
        raise Unsolvable("no path to the next objective")
    for x, y in path[:-1]:
        cell = state.grid[x][y]
        if cell.kind is CellKind.DOOR and cell.door_state is not DoorState.OPEN:
            return open_door(cell.color)
    return final


def _interaction_targets(state: EnvState, g: SubGoal):
    """Target cell and the primitive that fires on arrival, or raises."""
    if g.kind is GoalKind.GO_TO_GOAL:
        return state.goal_pos, None
    if g.color not in state.doors:
        raise world.UnknownLayoutColor(g.color.word)
    if g.kind is GoalKind.OPEN_DOOR:
        x, y = state.doors[g.color]
        if state.grid[x][y].door_state is DoorState.LOCKED and state.carrying != g.color:
            raise Unreachable(f"door {g.color.word} is locked and its key is not held")
        return (x, y), Action.TOGGLE
    if state.carrying is not None and state.carrying != g.color:
        raise Unreachable("hands full with a different key")
    if g.color not in state.keys_on_grid:
        raise Unreachable(f"no {g.color.word} key on the grid")
    return state.keys_on_grid[g.color], Action.PICKUP


def expert_action(state: EnvState, g: SubGoal) -> Action:
    """Next primitive action of a shortest plan toward the sub-goal.

    Already-satisfied sub-goals map to the inert `done` action.
    """
    if subgoal_satisfied(state, g):
        return Action.DONE
    target, interaction = _interaction_targets(state, g)

    def is_goal(x: int, y: int, d: Direction) -> bool:
        if interaction is None:
            return (x, y) == target
        dx, dy = DIR_VEC[d]
        return (x + dx, y + dy) == target

    start = (state.agent.x, state.agent.y, state.agent.dir)
    if is_goal(*start):
        return interaction
    first_action = {start: None}
    queue = deque([start])
    while queue:
        x, y, d = queue.popleft()
        for action in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
            if action is Action.FORWARD:
                dx, dy = DIR_VEC[d]
                nxt = (x + dx, y + dy, d)
                if not world._walkable(state.grid[x + dx][y + dy]):
                    continue
            elif action is Action.TURN_LEFT:
                nxt = (x, y, Direction((d - 1) % 4))
            else:
                nxt = (x, y, Direction((d + 1) % 4))
            if nxt in first_action:
                continue
            inherited = first_action[(x, y, d)]
            first_action[nxt] = action if inherited is None else inherited
            if is_goal(*nxt):
                return first_action[nxt]
            queue.append(nxt)
    raise Unreachable(f"no plan for {render(g).text!r}")


def run_expert_episode(state: EnvState):
    """Drive the expert closed loop to completion.

    Returns (macro list of (t, SubGoal), total env steps, success flag).
    """
    macros = []
    while not state.done:
        g = next_subgoal(state)
        macros.append((state.t, g))
        while not state.done and not subgoal_satisfied(state, g):
            step(state, expert_action(state, g))
    success = (state.agent.x, state.agent.y) == state.goal_pos
    return macros, state.t, success


@dataclass(frozen=True)
class DemoRecord:
    episode: int
    t: int  # macro-step index
    seed: int
    observation: np.ndarray
    instruction: Instruction
    subgoal: SubGoal


@dataclass
class DemoSet:
    records: list
    config: EnvConfig
    count_episodes: int

    def episodes(self) -> dict:
        by_ep: dict = {}
        for r in self.records:
            by_ep.setdefault(r.episode, []).append(r)
        return by_ep

    def take(self, n_episodes: int) -> "DemoSet":
        """Prefix subset: the first n episodes (ablation sets nest)."""
        records = [r for r in self.records if r.episode < n_episodes]
        return DemoSet(records, self.config, min(n_episodes, self.count_episodes))


def generate_demos(config: EnvConfig, n_episodes: int, seed: int) -> DemoSet:
    """Run the expert bot for n_episodes and record one (observation,
    instruction) pair per macro step. Episode seeds are seed + index."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    records = []
    for ep in range(n_episodes):
        ep_seed = seed + ep
        state = reset(config, ep_seed)
        macro = 0
        while not state.done:
            g = next_subgoal(state)
            records.append(
                DemoRecord(ep, macro, ep_seed, observe(state), render(g), g)
            )
            macro += 1
            while not state.done and not subgoal_satisfied(state, g):
                step(state, expert_action(state, g))
        if (state.agent.x, state.agent.y) != state.goal_pos:
            raise Unsolvable(f"expert failed on seed {ep_seed}")
    return DemoSet(records, config, n_episodes)


DEMOSET_FORMAT = "demoset/1"


def save_demos(demos: DemoSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        header = {
            "format": DEMOSET_FORMAT,
            "config": demos.config.to_json(),
            "count_episodes": demos.count_episodes,
        }
        f.write(json.dumps(header) + "\n")
        for r in demos.records:
            f.write(
                json.dumps(
                    {
                        "episode": r.episode,
                        "t": r.t,
                        "seed": r.seed,
                        "observation": r.observation.tolist(),
                        "instruction": r.instruction.text,
                        "subgoal": r.subgoal.to_json(),
                    }
                )
                + "\n"
            )


def load_demos(path) -> DemoSet:
    path = Path(path)
    with path.open() as f:
        header = json.loads(f.readline())
        if header.get("format") != DEMOSET_FORMAT:
            raise ValueError(f"not a {DEMOSET_FORMAT} file: {path}")
        config = EnvConfig.from_json(header["config"])
        records = []
        for line in f:
            obj = json.loads(line)
            g = SubGoal.from_json(obj["subgoal"])
            records.append(
                DemoRecord(
                    episode=obj["episode"],
                    t=obj["t"],
                    seed=obj["seed"],
                    observation=np.asarray(obj["observation"], dtype=np.uint8),
                    instruction=render(g),
                    subgoal=g,
                )
            )
    return DemoSet(records, config, header["count_episodes"])
