"""N-rooms gridworld with keys, colored doors, and a locked goal room.

Geometry: rooms tile a 2-row grid (4 rooms -> 2x2, 6 rooms -> 2x3) of
`room_size` interior cells per side, separated by single-cell walls. Every
adjacent room pair shares one door, except the goal room which keeps exactly
one (locked) entry door from the key room; its other walls are solid. The key
to the locked door sits in the room farthest from the start, so every layout
forces the Fig-3-style chain: open doors -> pick up key -> unlock -> goal.

Coordinates are (x, y) with x the column and y the row; (0, 0) is the
top-left wall corner. North decreases y, east increases x.

Observation encoding (uint8, shape [W, H, 3], fully observable):
  channel 0: cell kind ordinal (empty=0 wall=1 door=2 key=3 goal=4 agent=5)
  channel 1: color ordinal, 255 = no color
  channel 2: door state (open=0 closed=1 locked=2) on door cells;
             at the agent cell: dir + 4*(1+carried_color) when carrying a key,
             plain dir (0-3) otherwise; 0 elsewhere
The agent cell overwrites whatever it stands on (only relevant on open doors
and the goal cell).
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .grammar import (
    GO_TO_GOAL,
    Color,
    GoalKind,
    SubGoal,
    open_door,
    pick_up_key,
)


class CellKind(IntEnum):
    EMPTY = 0
    WALL = 1
    DOOR = 2
    KEY = 3
    GOAL = 4


AGENT_KIND = 5  # observation-only ordinal, never stored in the grid
NO_COLOR = 255


class DoorState(IntEnum):
    OPEN = 0
    CLOSED = 1
    LOCKED = 2


class Direction(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


# dx, dy per direction, indexed by Direction ordinal
DIR_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Action(IntEnum):
    """The 7 primitive actions; ordinals match the policy head."""

    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6


N_ACTIONS = len(Action)


class EpisodeDone(RuntimeError):
    """Raised when step() is called on a finished episode."""


class UnknownLayoutColor(ValueError):
    """Raised when a sub-goal references a color absent from the layout."""


@dataclass
class Cell:
    kind: CellKind = CellKind.EMPTY
    color: Optional[Color] = None
    door_state: Optional[DoorState] = None


@dataclass(frozen=True)
class EnvConfig:
    n_rooms: int = 4
    room_size: int = 5
    max_steps: Optional[int] = None  # None -> 400 (4 rooms) / 600 (6 rooms)
    reward_mode: str = "sparse"  # sparse | dense | subgoal
    subgoal_for_reward: Optional[SubGoal] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_rooms not in (4, 6):
            raise ValueError(f"n_rooms must be 4 or 6, got {self.n_rooms}")
        if self.room_size < 3:
            raise ValueError(f"room_size must be >= 3, got {self.room_size}")
        if self.reward_mode not in ("sparse", "dense", "subgoal"):
            raise ValueError(f"unknown reward_mode: {self.reward_mode!r}")
        if (self.reward_mode == "subgoal") != (self.subgoal_for_reward is not None):
            raise ValueError("subgoal_for_reward is required iff reward_mode='subgoal'")
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 400 if self.n_rooms == 4 else 600)
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")

    @property
    def room_cols(self) -> int:
        return self.n_rooms // 2

    @property
    def width(self) -> int:
        return self.room_cols * (self.room_size + 1) + 1

    @property
    def height(self) -> int:
        return 2 * (self.room_size + 1) + 1

    def to_json(self) -> dict:
        return {
            "n_rooms": self.n_rooms,
            "room_size": self.room_size,
            "max_steps": self.max_steps,
            "reward_mode": self.reward_mode,
            "subgoal_for_reward": (
                None if self.subgoal_for_reward is None else self.subgoal_for_reward.to_json()
            ),
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "EnvConfig":
        sg = obj.get("subgoal_for_reward")
        return EnvConfig(
            n_rooms=obj["n_rooms"],
            room_size=obj["room_size"],
            max_steps=obj["max_steps"],
            reward_mode=obj["reward_mode"],
            subgoal_for_reward=None if sg is None else SubGoal.from_json(sg),
            seed=obj["seed"],
        )


@dataclass
class AgentPose:
    x: int
    y: int
    dir: Direction


@dataclass
class EnvState:
    config: EnvConfig
    grid: list  # grid[x][y] -> Cell
    agent: AgentPose
    carrying: Optional[Color]
    t: int
    done: bool
    task_chain: list  # ordered SubGoal chain for this layout
    # layout facts (fixed after reset)
    doors: dict  # Color -> (x, y)
    locked_color: Color
    key_color: Color
    goal_pos: tuple
    # bookkeeping
    keys_on_grid: dict = field(default_factory=dict)  # Color -> (x, y)
    chain_credited: set = field(default_factory=set)  # dense-reward chain indices
    _obs_base: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def height(self) -> int:
        return self.config.height

    def cell(self, x: int, y: int) -> Cell:
        return self.grid[x][y]

    def to_json(self) -> dict:
        """Canonical serialization (used by determinism checks and the service)."""
        cells = []
        for x in range(self.width):
            col = []
            for y in range(self.height):
                c = self.grid[x][y]
                col.append(
                    [
                        int(c.kind),
                        NO_COLOR if c.color is None else int(c.color),
                        -1 if c.door_state is None else int(c.door_state),
                    ]
                )
            cells.append(col)
        return {
            "config": self.config.to_json(),
            "grid": cells,
            "agent": {"x": self.agent.x, "y": self.agent.y, "dir": int(self.agent.dir)},
            "carrying": None if self.carrying is None else self.carrying.word,
            "t": self.t,
            "done": self.done,
            "task_chain": [g.to_json() for g in self.task_chain],
            "doors": {c.word: list(p) for c, p in sorted(self.doors.items())},
            "locked_color": self.locked_color.word,
            "goal_pos": list(self.goal_pos),
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()


def _room_interior(config: EnvConfig, room: tuple) -> list:
    r, c = room
    rs = config.room_size
    x0, y0 = c * (rs + 1) + 1, r * (rs + 1) + 1
    return [(x, y) for x in range(x0, x0 + rs) for y in range(y0, y0 + rs)]


def _adjacent_room_pairs(cols: int) -> list:
    pairs = []
    for r in range(2):
        for c in range(cols - 1):
            pairs.append(((r, c), (r, c + 1)))
    for c in range(cols):
        pairs.append(((0, c), (1, c)))
    return pairs


def _door_slots(config: EnvConfig, pair: tuple) -> list:
    """Candidate door cells on the wall shared by a room pair."""
    (r1, c1), (r2, c2) = pair
    rs = config.room_size
    if r1 == r2:  # horizontal neighbors, vertical wall
        x = max(c1, c2) * (rs + 1)
        y0 = r1 * (rs + 1) + 1
        return [(x, y) for y in range(y0, y0 + rs)]
    y = rs + 1
    x0 = c1 * (rs + 1) + 1
    return [(x, y) for x in range(x0, x0 + rs)]


def reset(config: EnvConfig, seed: Optional[int] = None) -> EnvState:
    """Build a fresh seeded layout. Deterministic in (config, seed)."""
    if seed is None:
        seed = config.seed
    rng = random.Random(seed)
    rs, cols = config.room_size, config.room_cols
    W, H = config.width, config.height

    grid = [
        [
            Cell(CellKind.WALL if (x % (rs + 1) == 0 or y % (rs + 1) == 0) else CellKind.EMPTY)
            for y in range(H)
        ]
        for x in range(W)
    ]

    corners = [(0, 0), (0, cols - 1), (1, 0), (1, cols - 1)]
    start_room = corners[rng.randrange(4)]
    goal_room = (1 - start_room[0], cols - 1 - start_room[1])
    neighbors = [(1 - goal_room[0], goal_room[1])]
    neighbors.append((goal_room[0], goal_room[1] + (1 if goal_room[1] == 0 else -1)))
    key_room = neighbors[rng.randrange(2)]

    # Doors on every shared wall except the goal room, which keeps a single
    # locked entry from the key room.
    door_cells = {}
    locked_pair = tuple(sorted((key_room, goal_room)))
    for pair in _adjacent_room_pairs(cols):
        if goal_room in pair and tuple(sorted(pair)) != locked_pair:
            continue
        slots = _door_slots(config, pair)
        door_cells[tuple(sorted(pair))] = slots[rng.randrange(len(slots))]

    colors = rng.sample(list(Color), len(door_cells))
    doors = {}
    locked_color = None
    for (pair, pos), color in zip(sorted(door_cells.items()), colors):
        x, y = pos
        locked = pair == locked_pair
        grid[x][y] = Cell(CellKind.DOOR, color, DoorState.LOCKED if locked else DoorState.CLOSED)
        doors[color] = pos
        if locked:
            locked_color = color

    goal_pos = _room_interior(config, goal_room)[rng.randrange(rs * rs)]
    grid[goal_pos[0]][goal_pos[1]] = Cell(CellKind.GOAL)

    key_pos = _room_interior(config, key_room)[rng.randrange(rs * rs)]
    grid[key_pos[0]][key_pos[1]] = Cell(CellKind.KEY, locked_color)

    agent_pos = _room_interior(config, start_room)[rng.randrange(rs * rs)]
    agent = AgentPose(agent_pos[0], agent_pos[1], Direction(rng.randrange(4)))

    state = EnvState(
        config=config,
        grid=grid,
        agent=agent,
        carrying=None,
        t=0,
        done=False,
        task_chain=[],
        doors=doors,
        locked_color=locked_color,
        key_color=locked_color,
        goal_pos=goal_pos,
        keys_on_grid={locked_color: key_pos},
    )
    state.task_chain = _reference_chain(state)

    if config.reward_mode == "subgoal":
        _apply_subgoal_variant(state, config.subgoal_for_reward, rng)
    return state


def _apply_subgoal_variant(state: EnvState, g: SubGoal, rng: random.Random) -> None:
    """Reshape the layout so the sampled sub-goal is achievable on its own:
    every door starts closed-unlocked, except that open_door(locked color)
    keeps its lock and hands the agent the key, and go_to_goal opens the
    goal door. The agent is re-placed uniformly over empty cells so episodes
    cover the mid-task states the controller sees at evaluation time."""
    if g.color is not None and g.color not in state.doors:
        raise UnknownLayoutColor(g.color.word)
    for color, (x, y) in state.doors.items():
        state.grid[x][y].door_state = DoorState.CLOSED
    if g.kind is GoalKind.OPEN_DOOR and g.color == state.locked_color:
        dx, dy = state.doors[state.locked_color]
        state.grid[dx][dy].door_state = DoorState.LOCKED
        kx, ky = state.keys_on_grid.pop(state.key_color)
        state.grid[kx][ky] = Cell(CellKind.EMPTY)
        state.carrying = state.key_color
    elif g.kind is GoalKind.GO_TO_GOAL:
        dx, dy = state.doors[state.locked_color]
        state.grid[dx][dy].door_state = DoorState.OPEN
    empties = [
        (x, y)
        for x in range(state.width)
        for y in range(state.height)
        if state.grid[x][y].kind is CellKind.EMPTY
    ]
    ax, ay = empties[rng.randrange(len(empties))]
    state.agent = AgentPose(ax, ay, Direction(rng.randrange(4)))


def _walkable(cell: Cell) -> bool:
    if cell.kind in (CellKind.EMPTY, CellKind.GOAL):
        return True
    return cell.kind is CellKind.DOOR and cell.door_state is DoorState.OPEN


def find_path(
    state: EnvState,
    src: tuple,
    dst: tuple,
    through_closed: bool = False,
) -> Optional[list]:
    """Cheapest cell path src -> dst; neighbor order N/E/S/W.

    Walkable cells plus, when `through_closed`, closed or locked doors (the
    planner's view: doors it could open). Paths minimize the number of
    closed doors crossed first and step count second, so the planner never
    trades an extra door for a shortcut. `dst` is always allowed as an
    endpoint even if blocked (keys, doors). Returns the path including both
    endpoints, or None.
    """
    if src == dst:
        return [src]
    best = {src: (0, 0)}
    came_from = {src: None}
    tie = 0
    heap = [(0, 0, 0, src)]
    while heap:
        doors, steps, _, pos = heapq.heappop(heap)
        if (doors, steps) > best.get(pos, (doors, steps)):
            continue
        if pos == dst:
            path = [pos]
            while came_from[path[-1]] is not None:
                path.append(came_from[path[-1]])
            path.reverse()
            return path
        x, y = pos
        for dx, dy in DIR_VEC:
            nxt = (x + dx, y + dy)
            cell = state.grid[nxt[0]][nxt[1]]
            closed_door = cell.kind is CellKind.DOOR and cell.door_state is not DoorState.OPEN
            if nxt != dst and not (_walkable(cell) or (through_closed and closed_door)):
                continue
            cost = (doors + (1 if closed_door else 0), steps + 1)
            if nxt not in best or cost < best[nxt]:
                best[nxt] = cost
                came_from[nxt] = pos
                tie += 1
                heapq.heappush(heap, (cost[0], cost[1], tie, nxt))
    return None


def _doors_on_path(state: EnvState, path: list, exclude: set) -> list:
    out = []
    for x, y in path:
        cell = state.grid[x][y]
        if (
            cell.kind is CellKind.DOOR
            and cell.door_state is not DoorState.OPEN
            and cell.color not in exclude
        ):
            out.append(cell.color)
            exclude = exclude | {cell.color}
    return out


def _reference_chain(state: EnvState) -> list:
    """The expert sub-goal chain for a fresh layout: unlocked doors on the way
    to the key, pick it up, unlock the goal door, reach the goal."""
    key_pos = state.keys_on_grid[state.key_color]
    chain = []
    seen = {state.locked_color}
    path = find_path(state, (state.agent.x, state.agent.y), key_pos, through_closed=True)
    for c in _doors_on_path(state, path, seen):
        chain.append(open_door(c))
        seen.add(c)
    chain.append(pick_up_key(state.key_color))
    path = find_path(state, key_pos, state.doors[state.locked_color], through_closed=True)
    for c in _doors_on_path(state, path, seen):
        chain.append(open_door(c))
        seen.add(c)
    chain.append(open_door(state.locked_color))
    chain.append(GO_TO_GOAL)
    return chain


def instantiable_subgoals(state: EnvState) -> list:
    """Sub-goals this layout supports: one per door color, one per key color,
    plus go_to_goal. Fixed order (door colors ascending, then keys, then goal)."""
    goals = [open_door(c) for c in sorted(state.doors)]
    goals.append(pick_up_key(state.key_color))
    goals.append(GO_TO_GOAL)
    return goals


def subgoal_satisfied(state: EnvState, g: SubGoal) -> bool:
    if g.kind is GoalKind.GO_TO_GOAL:
        return (state.agent.x, state.agent.y) == state.goal_pos
    if g.color not in state.doors:
        raise UnknownLayoutColor(g.color.word)
    if g.kind is GoalKind.OPEN_DOOR:
        x, y = state.doors[g.color]
        return state.grid[x][y].door_state is DoorState.OPEN
    return state.carrying == g.color


def reachable_cells(state: EnvState) -> set:
    """Flood fill from the agent over walkable cells (closed/locked doors and
    keys block)."""
    start = (state.agent.x, state.agent.y)
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in DIR_VEC:
            nxt = (x + dx, y + dy)
            if nxt not in seen and _walkable(state.grid[nxt[0]][nxt[1]]):
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _satisfaction_vector(state: EnvState, goals: list) -> list:
    return [subgoal_satisfied(state, g) for g in goals]


def step(state: EnvState, action: Action):
    """Advance one step. Returns (state, reward, done, newly_satisfied).

    newly_satisfied lists the instantiable sub-goals whose predicate flipped
    false -> true on this step.
    """
    if state.done:
        raise EpisodeDone("step() on a finished episode")
    action = Action(action)
    goals = instantiable_subgoals(state)
    before = _satisfaction_vector(state, goals)

    agent = state.agent
    if action is Action.TURN_LEFT:
        agent.dir = Direction((agent.dir - 1) % 4)
    elif action is Action.TURN_RIGHT:
        agent.dir = Direction((agent.dir + 1) % 4)
    else:
        dx, dy = DIR_VEC[agent.dir]
        fx, fy = agent.x + dx, agent.y + dy
        front = state.grid[fx][fy]
        if action is Action.FORWARD:
            if _walkable(front):
                agent.x, agent.y = fx, fy
        elif action is Action.PICKUP:
            if front.kind is CellKind.KEY and state.carrying is None:
                state.carrying = front.color
                del state.keys_on_grid[front.color]
                state.grid[fx][fy] = Cell(CellKind.EMPTY)
                _refresh_obs_cell(state, fx, fy)
        elif action is Action.DROP:
            if state.carrying is not None and front.kind is CellKind.EMPTY:
                state.grid[fx][fy] = Cell(CellKind.KEY, state.carrying)
                state.keys_on_grid[state.carrying] = (fx, fy)
                state.carrying = None
                _refresh_obs_cell(state, fx, fy)
        elif action is Action.TOGGLE:
            if front.kind is CellKind.DOOR:
                if front.door_state is DoorState.CLOSED:
                    front.door_state = DoorState.OPEN
                    _refresh_obs_cell(state, fx, fy)
                elif front.door_state is DoorState.LOCKED and state.carrying == front.color:
                    front.door_state = DoorState.OPEN
                    state.carrying = None  # key consumed on unlock
                    _refresh_obs_cell(state, fx, fy)
        # Action.DONE is a no-op

    state.t += 1
    after = _satisfaction_vector(state, goals)
    newly = [g for g, b, a in zip(goals, before, after) if a and not b]

    reward = 0.0
    mode = state.config.reward_mode
    at_goal = (agent.x, agent.y) == state.goal_pos
    if mode == "sparse":
        if at_goal:
            reward = 1.0
    elif mode == "dense":
        for i, g in enumerate(state.task_chain):
            if i not in state.chain_credited and subgoal_satisfied(state, g):
                state.chain_credited.add(i)
                reward += 0.25
        if at_goal:
            reward += 1.0
    else:  # subgoal
        target = state.config.subgoal_for_reward
        if subgoal_satisfied(state, target):
            reward = 1.0

    done = at_goal or state.t >= state.config.max_steps
    if mode == "subgoal" and subgoal_satisfied(state, state.config.subgoal_for_reward):
        done = True
    state.done = done
    return state, reward, done, newly


def _cell_obs(cell: Cell):
    color = NO_COLOR if cell.color is None else int(cell.color)
    third = int(cell.door_state) if cell.kind is CellKind.DOOR else 0
    return int(cell.kind), color, third


def _build_obs_base(state: EnvState) -> np.ndarray:
    obs = np.zeros((state.width, state.height, 3), dtype=np.uint8)
    for x in range(state.width):
        for y in range(state.height):
            obs[x, y] = _cell_obs(state.grid[x][y])
    return obs


def _refresh_obs_cell(state: EnvState, x: int, y: int) -> None:
    if state._obs_base is not None:
        state._obs_base[x, y] = _cell_obs(state.grid[x][y])


def observe(state: EnvState) -> np.ndarray:
    """Encode the full grid as a uint8 [W, H, 3] array (see module docstring)."""
    if state._obs_base is None:
        state._obs_base = _build_obs_base(state)
    obs = state._obs_base.copy()
    a = state.agent
    third = int(a.dir)
    if state.carrying is not None:
        third += 4 * (1 + int(state.carrying))
    obs[a.x, a.y] = (AGENT_KIND, NO_COLOR, third)
    return obs


def decode_observation(obs: np.ndarray) -> dict:
    """Recover the structured view from an observation array (round-trip and
    service snapshots)."""
    W, H, _ = obs.shape
    agent = None
    cells = []
    for x in range(W):
        col = []
        for y in range(H):
            kind, color, third = (int(v) for v in obs[x, y])
            if kind == AGENT_KIND:
                carrying = None if third < 4 else Color(third // 4 - 1)
                agent = {"x": x, "y": y, "dir": int(third % 4), "carrying": carrying}
                col.append({"kind": None})
            else:
                col.append(
                    {
                        "kind": CellKind(kind),
                        "color": None if color == NO_COLOR else Color(color),
                        "door_state": DoorState(third) if kind == CellKind.DOOR else None,
                    }
                )
        cells.append(col)
    return {"cells": cells, "agent": agent}


GLYPHS = {CellKind.EMPTY: ".", CellKind.WALL: "#", CellKind.KEY: "k", CellKind.GOAL: "G"}


def render_ascii(state: EnvState) -> str:
    """Debug rendering; agent is one of ^>v< by facing."""
    rows = []
    for y in range(state.height):
        row = []
        for x in range(state.width):
            if (x, y) == (state.agent.x, state.agent.y):
                row.append("^>v<"[state.agent.dir])
                continue
            cell = state.grid[x][y]
            if cell.kind is CellKind.DOOR:
                row.append({"open": "/", "closed": "+", "locked": "L"}[cell.door_state.name.lower()])
            else:
                row.append(GLYPHS[cell.kind])
        rows.append("".join(row))
    return "\n".join(rows)
