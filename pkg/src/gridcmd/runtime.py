"""Two-level agent: compose the instruction generator and the controller at a
fixed macro horizon, with three intervention regimes.

Every H_l env steps the generator greedily decodes an instruction from the
current observation. Under `oracle` intervention the decode is compared
against the symbolic expert's recommendation and replaced on mismatch (one
intervention counted); under `interactive` the decision is delegated to an
override source (the session service / console); under `none` the decode is
used as-is, falling back to the previous instruction (or "go to the goal" at
t=0) when it is not grammatical.

Evaluation is deterministic for the non-interactive regimes: greedy decode,
greedy action selection, seeded layouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from . import world
from .expert import Unreachable, expert_action, next_subgoal
from .grammar import (
    NonGrammatical,
    SubGoal,
    detokenize,
    normalize,
    parse,
    render,
    tokenize,
)
from .models import (
    ParamStore,
    decode_instruction,
    encode_instruction,
    encode_state,
    preprocess,
)
from .world import Action, EnvConfig, EnvState, observe, reset, step

FALLBACK_INSTRUCTION = "go to the goal"


@dataclass(frozen=True)
class RuntimeConfig:
    env_cfg: EnvConfig
    H_l: int = 10
    intervention: str = "none"  # none | oracle | interactive
    n_episodes: int = 50
    seeds: Optional[tuple] = None  # explicit episode seeds; default derived

    def __post_init__(self) -> None:
        if self.H_l < 1:
            raise ValueError("H_l must be >= 1")
        if self.intervention not in ("none", "oracle", "interactive"):
            raise ValueError(f"unknown intervention regime: {self.intervention!r}")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")

    def episode_seeds(self) -> list:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.env_cfg.seed + i for i in range(self.n_episodes)]

    def to_json(self) -> dict:
        return {
            "env_cfg": self.env_cfg.to_json(),
            "H_l": self.H_l,
            "intervention": self.intervention,
            "n_episodes": self.n_episodes,
            "seeds": None if self.seeds is None else list(self.seeds),
        }

    @staticmethod
    def from_json(obj: dict) -> "RuntimeConfig":
        return RuntimeConfig(
            env_cfg=EnvConfig.from_json(obj["env_cfg"]),
            H_l=obj.get("H_l", 10),
            intervention=obj.get("intervention", "none"),
            n_episodes=obj.get("n_episodes", 50),
            seeds=None if obj.get("seeds") is None else tuple(obj["seeds"]),
        )


@dataclass
class MacroDecision:
    t: int
    generated: str
    final: str
    intervened: bool

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EpisodeTrace:
    seed: int
    macros: list = field(default_factory=list)
    env_steps: int = 0
    success: bool = False
    total_reward: float = 0.0

    @property
    def interventions(self) -> int:
        return sum(m.intervened for m in self.macros)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "macros": [m.to_json() for m in self.macros],
            "env_steps": self.env_steps,
            "success": self.success,
            "total_reward": self.total_reward,
        }


@dataclass
class EvalReport:
    tc_percent: float
    avg_hi: float
    n_episodes: int
    traces: list

    def to_json(self) -> dict:
        return {
            "tc_percent": self.tc_percent,
            "avg_hi": self.avg_hi,
            "n_episodes": self.n_episodes,
            "traces": [t.to_json() for t in self.traces],
        }


def oracle_intervene(state: EnvState, generated: str):
    """Replace the generated instruction when it fails to parse or disagrees
    with the symbolic expert. Returns (final text, intervened flag)."""
    expected = render(next_subgoal(state))
    try:
        g = parse(generated)
    except NonGrammatical:
        return expected.text, True
    if g == parse(expected.text):
        return normalize(generated), False
    return expected.text, True


class EpisodeRunner:
    """One episode of the two-level agent, advanced macro step by macro step.

    `propose()` yields the generator's instruction at the current boundary;
    `apply(final, intervened)` conditions the controller on the final
    instruction and advances up to H_l env steps. run_episode() drives this
    loop for the scripted regimes; the session service drives it per
    override.
    """

    def __init__(self, gen: Optional[ParamStore], ctrl: Optional[ParamStore],
                 cfg: RuntimeConfig, seed: int, on_step: Optional[Callable] = None):
        self.gen = gen
        self.ctrl = ctrl
        self.cfg = cfg
        self.state = reset(cfg.env_cfg, seed)
        self.trace = EpisodeTrace(seed=seed)
        self.on_step = on_step
        self._lang_cache: dict = {}
        self._last_final: Optional[str] = None

    @property
    def done(self) -> bool:
        return self.state.done

    def propose(self) -> str:
        """Generator's greedy instruction for the current observation (the
        expert's recommendation when no generator is loaded)."""
        if self.gen is None:
            return render(next_subgoal(self.state)).text
        emb = encode_state(self.gen, observe(self.state))
        return detokenize(decode_instruction(self.gen, emb))

    def resolve(self, generated: str):
        """Apply this runner's scripted intervention regime."""
        if self.cfg.intervention == "oracle":
            return oracle_intervene(self.state, generated)
        final = normalize(generated)
        if not _grammatical(final):
            final = self._last_final if self._last_final else FALLBACK_INSTRUCTION
        return final, False

    def apply(self, generated: str, final: str, intervened: bool) -> None:
        """Record the macro decision and run the controller for H_l steps."""
        if not _grammatical(final):
            raise NonGrammatical(final)
        self.trace.macros.append(
            MacroDecision(self.state.t, normalize(generated), final, intervened)
        )
        self._last_final = final
        subgoal = parse(final)
        tokens = tokenize(final)
        for _ in range(self.cfg.H_l):
            if self.state.done:
                break
            action = self._controller_action(subgoal, tokens)
            _, reward, _, _ = step(self.state, action)
            self.trace.total_reward += reward
            if self.on_step is not None:
                self.on_step(self.state)
        self.trace.env_steps = self.state.t
        if self.state.done:
            self.trace.success = (
                (self.state.agent.x, self.state.agent.y) == self.state.goal_pos
            )

    def _controller_action(self, subgoal: SubGoal, tokens: list) -> Action:
        if self.ctrl is None:
            try:
                return expert_action(self.state, subgoal)
            except (Unreachable, world.UnknownLayoutColor):
                return Action.DONE  # expert stand-in idles on impossible orders
        key = tuple(tokens)
        if key not in self._lang_cache:
            self._lang_cache[key] = encode_instruction(self.ctrl, tokens).detach()
        net = self.ctrl.module
        with torch.no_grad():
            planes = torch.from_numpy(preprocess(observe(self.state))).unsqueeze(0)
            logits, _ = net.heads(net.encoder(planes), self._lang_cache[key].unsqueeze(0))
        return Action(int(logits.argmax()))

    def advance_macro(self, override_source: Optional[Callable] = None) -> None:
        generated = self.propose()
        if self.cfg.intervention == "interactive":
            if override_source is None:
                raise ValueError("interactive regime requires an override source")
            decision = override_source(self.state, generated)
            if decision.get("accept", False):
                final, intervened = self.resolve(generated)[0], False
            else:
                final, intervened = normalize(decision["instruction"]), True
        else:
            final, intervened = self.resolve(generated)
        self.apply(generated, final, intervened)


def _grammatical(text: str) -> bool:
    try:
        parse(text)
        return True
    except NonGrammatical:
        return False


def run_episode(
    gen: Optional[ParamStore],
    ctrl: Optional[ParamStore],
    cfg: RuntimeConfig,
    seed: int,
    override_source: Optional[Callable] = None,
) -> EpisodeTrace:
    """Run one full episode under cfg's intervention regime."""
    runner = EpisodeRunner(gen, ctrl, cfg, seed)
    while not runner.done:
        runner.advance_macro(override_source)
    return runner.trace


def evaluate(gen: Optional[ParamStore], ctrl: Optional[ParamStore], cfg: RuntimeConfig) -> EvalReport:
    """Run cfg.n_episodes seeded episodes and aggregate TC% and Avg-HI."""
    traces = [run_episode(gen, ctrl, cfg, seed) for seed in cfg.episode_seeds()]
    tc = sum(t.success for t in traces) / len(traces)
    avg_hi = sum(t.interventions for t in traces) / len(traces)
    return EvalReport(tc_percent=tc, avg_hi=avg_hi, n_episodes=len(traces), traces=traces)
