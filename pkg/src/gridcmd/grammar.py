"""Sub-goal language: structured sub-goals, their sentence templates, and the
fixed token vocabulary shared by every sequence model.

The language is closed-world: 13 sentences total (6 colors x 2 color
templates + "go to the goal"). All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional


class Color(IntEnum):
    """Object colors. Ordinals are frozen (observation and vocab encoding)."""

    RED = 0
    GREEN = 1
    BLUE = 2
    PURPLE = 3
    YELLOW = 4
    GREY = 5

    @property
    def word(self) -> str:
        return self.name.lower()


COLORS = tuple(Color)

# Frozen token id table. Ids are part of the checkpoint format; never renumber.
VOCAB: dict[str, int] = {
    "<pad>": 0,
    "<bos>": 1,
    "<eos>": 2,
    "open": 3,
    "the": 4,
    "pick": 5,
    "up": 6,
    "go": 7,
    "to": 8,
    "goal": 9,
    "door": 10,
    "key": 11,
    "yellow": 12,
    "red": 13,
    "blue": 14,
    "green": 15,
    "purple": 16,
    "grey": 17,
}
VOCAB_SIZE = len(VOCAB)
PAD, BOS, EOS = VOCAB["<pad>"], VOCAB["<bos>"], VOCAB["<eos>"]
ID_TO_WORD = {i: w for w, i in VOCAB.items()}

# Longest sentence is 4 words; 5 is the contract ceiling for Instruction.text.
MAX_WORDS = 5


class NonGrammatical(ValueError):
    """Raised by parse() for any string outside the 13-sentence language."""


class UnknownToken(ValueError):
    """Raised by tokenize() for a word missing from the vocabulary."""


class GoalKind(IntEnum):
    OPEN_DOOR = 0
    PICK_UP_KEY = 1
    GO_TO_GOAL = 2


@dataclass(frozen=True)
class SubGoal:
    """A structured sub-task: open a door, pick up a key, or reach the goal."""

    kind: GoalKind
    color: Optional[Color] = None

    def __post_init__(self) -> None:
        if self.kind is GoalKind.GO_TO_GOAL:
            if self.color is not None:
                raise ValueError("go_to_goal carries no color")
        elif self.color is None:
            raise ValueError(f"{self.kind.name} requires a color")

    def to_json(self) -> dict:
        if self.kind is GoalKind.GO_TO_GOAL:
            return {"kind": "go_to_goal"}
        kind = "open_door" if self.kind is GoalKind.OPEN_DOOR else "pick_up_key"
        return {"kind": kind, "color": self.color.word}

    @staticmethod
    def from_json(obj: dict) -> "SubGoal":
        kind = obj["kind"]
        if kind == "go_to_goal":
            return SubGoal(GoalKind.GO_TO_GOAL)
        color = Color[obj["color"].upper()]
        if kind == "open_door":
            return SubGoal(GoalKind.OPEN_DOOR, color)
        if kind == "pick_up_key":
            return SubGoal(GoalKind.PICK_UP_KEY, color)
        raise ValueError(f"unknown sub-goal kind: {kind!r}")


def open_door(color: Color) -> SubGoal:
    return SubGoal(GoalKind.OPEN_DOOR, color)


def pick_up_key(color: Color) -> SubGoal:
    return SubGoal(GoalKind.PICK_UP_KEY, color)


GO_TO_GOAL = SubGoal(GoalKind.GO_TO_GOAL)


@dataclass(frozen=True)
class Instruction:
    """Surface form of a sub-goal: token ids (no bos/eos) plus the text."""

    tokens: tuple[int, ...]
    text: str


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace; the canonical sentence form."""
    return " ".join(text.lower().split())


def tokenize(text: str) -> list[int]:
    """Map words to token ids. Raises UnknownToken for out-of-vocab words."""
    ids = []
    for word in normalize(text).split():
        if word not in VOCAB:
            raise UnknownToken(word)
        ids.append(VOCAB[word])
    return ids


def detokenize(ids) -> str:
    """Inverse of tokenize; pad/bos/eos are stripped."""
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS):
            continue
        if i not in ID_TO_WORD:
            raise UnknownToken(str(i))
        words.append(ID_TO_WORD[i])
    return " ".join(words)


def render(g: SubGoal) -> Instruction:
    """Realize a sub-goal as its template sentence."""
    if g.kind is GoalKind.OPEN_DOOR:
        text = f"open the {g.color.word} door"
    elif g.kind is GoalKind.PICK_UP_KEY:
        text = f"pick up the {g.color.word} key"
    else:
        text = "go to the goal"
    return Instruction(tuple(tokenize(text)), text)


def parse(text: str) -> SubGoal:
    """Exact-template inverse of render (after normalization).

    Raises NonGrammatical for anything outside the 13-sentence language.
    """
    norm = normalize(text)
    words = norm.split()
    if len(words) == 4 and words[:2] == ["open", "the"] and words[3] == "door":
        color = _color_from_word(words[2], norm)
        return SubGoal(GoalKind.OPEN_DOOR, color)
    if len(words) == 5 and words[:3] == ["pick", "up", "the"] and words[4] == "key":
        color = _color_from_word(words[3], norm)
        return SubGoal(GoalKind.PICK_UP_KEY, color)
    if words == ["go", "to", "the", "goal"]:
        return GO_TO_GOAL
    raise NonGrammatical(text)


def _color_from_word(word: str, sentence: str) -> Color:
    try:
        return Color[word.upper()]
    except KeyError:
        raise NonGrammatical(sentence) from None


def is_grammatical(text: str) -> bool:
    try:
        parse(text)
        return True
    except NonGrammatical:
        return False


def all_subgoals() -> list[SubGoal]:
    """The full 13-element sub-goal space, in a fixed order."""
    goals = [open_door(c) for c in COLORS]
    goals += [pick_up_key(c) for c in COLORS]
    goals.append(GO_TO_GOAL)
    return goals
