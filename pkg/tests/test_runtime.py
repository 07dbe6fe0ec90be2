import itertools

import pytest

from gridcmd.expert import next_subgoal
from gridcmd.grammar import NonGrammatical, render
from gridcmd.runtime import (
    EpisodeRunner,
    EvalReport,
    FALLBACK_INSTRUCTION,
    RuntimeConfig,
    evaluate,
    oracle_intervene,
    run_episode,
)
from gridcmd.world import EnvConfig, reset


def _cfg(**kw):
    return RuntimeConfig(env_cfg=EnvConfig(n_rooms=4), **kw)


class ScriptedRunner(EpisodeRunner):
    """EpisodeRunner whose generator is a scripted list of proposals."""

    def __init__(self, cfg, seed, script):
        super().__init__(None, None, cfg, seed)
        self._script = itertools.chain(script, itertools.repeat(None))

    def propose(self):
        scripted = next(self._script)
        if scripted is None:
            return render(next_subgoal(self.state)).text
        return scripted


def test_expert_closed_loop_hits_full_completion():
    cfg = _cfg(intervention="none", n_episodes=10)
    report = evaluate(None, None, cfg)
    assert report.tc_percent == 1.0
    assert report.avg_hi == 0.0
    assert report.n_episodes == 10


def test_macro_boundaries_every_h_steps():
    trace = run_episode(None, None, _cfg(H_l=10), seed=3)
    for k, m in enumerate(trace.macros):
        assert m.t == 10 * k
    assert trace.success


def test_oracle_intervene_agreement():
    s = reset(EnvConfig(n_rooms=4), 5)
    expert_text = render(next_subgoal(s)).text
    final, hit = oracle_intervene(s, expert_text)
    assert (final, hit) == (expert_text, False)
    final, hit = oracle_intervene(s, expert_text.upper())
    assert (final, hit) == (expert_text, False)  # normalization, not intervention


def test_oracle_intervene_replaces_ungrammatical():
    s = reset(EnvConfig(n_rooms=4), 5)
    expert_text = render(next_subgoal(s)).text
    final, hit = oracle_intervene(s, "do a flip")
    assert (final, hit) == (expert_text, True)


def test_oracle_intervene_replaces_wrong_subgoal():
    s = reset(EnvConfig(n_rooms=4), 5)
    expert_text = render(next_subgoal(s)).text
    assert expert_text != "go to the goal"  # fresh reset: goal room locked
    final, hit = oracle_intervene(s, "go to the goal")
    assert (final, hit) == (expert_text, True)


def test_adversarial_generator_triggers_immediate_intervention():
    cfg = _cfg(intervention="oracle")
    runner = ScriptedRunner(cfg, seed=7, script=["go to the goal"])
    runner.advance_macro()
    assert runner.trace.macros[0].intervened
    assert runner.trace.macros[0].generated == "go to the goal"
    assert runner.trace.macros[0].final != "go to the goal"


def test_perfect_generator_oracle_counts_zero():
    cfg = _cfg(intervention="oracle", n_episodes=5)
    report = evaluate(None, None, cfg)  # expert proposals match the oracle
    assert report.avg_hi == 0.0
    assert report.tc_percent == 1.0


def test_ungrammatical_fallback_under_none():
    cfg = _cfg(intervention="none")
    runner = ScriptedRunner(cfg, seed=7, script=["blargh", None, "zap zap"])
    runner.advance_macro()
    assert runner.trace.macros[0].final == FALLBACK_INSTRUCTION
    assert not runner.trace.macros[0].intervened
    runner.advance_macro()
    second = runner.trace.macros[1].final
    runner.advance_macro()
    assert runner.trace.macros[2].final == second  # previous instruction reused


def test_trace_invariants_intervened_implies_changed():
    cfg = _cfg(intervention="oracle", n_episodes=6)
    report = evaluate(None, None, cfg)
    for trace in report.traces:
        for m in trace.macros:
            if m.intervened:
                assert m.final != m.generated
            # every final instruction is grammatical
            from gridcmd.grammar import parse

            parse(m.final)


def test_run_episode_deterministic():
    cfg = _cfg(intervention="oracle")
    a = run_episode(None, None, cfg, seed=11)
    b = run_episode(None, None, cfg, seed=11)
    assert a.to_json() == b.to_json()


def test_interactive_regime_accept_and_override():
    cfg = _cfg(intervention="interactive")
    decisions = []

    def source(state, generated):
        decisions.append(generated)
        if len(decisions) == 1:
            return {"accept": True}
        return {"accept": False, "instruction": render(next_subgoal(state)).text}

    trace = run_episode(None, None, cfg, seed=3, override_source=source)
    assert not trace.macros[0].intervened
    assert all(m.intervened for m in trace.macros[1:])
    assert trace.interventions == len(trace.macros) - 1


def test_interactive_requires_source():
    cfg = _cfg(intervention="interactive")
    with pytest.raises(ValueError):
        run_episode(None, None, cfg, seed=0)


def test_interactive_rejects_ungrammatical_override():
    cfg = _cfg(intervention="interactive")

    def source(state, generated):
        return {"accept": False, "instruction": "do a flip"}

    with pytest.raises(NonGrammatical):
        run_episode(None, None, cfg, seed=0, override_source=source)


def test_runtime_config_validation_and_json():
    with pytest.raises(ValueError):
        _cfg(H_l=0)
    with pytest.raises(ValueError):
        _cfg(intervention="human")
    with pytest.raises(ValueError):
        _cfg(n_episodes=0)
    cfg = _cfg(intervention="oracle", n_episodes=3, seeds=(5, 6, 7))
    assert RuntimeConfig.from_json(cfg.to_json()) == cfg
    assert cfg.episode_seeds() == [5, 6, 7]
    assert _cfg(n_episodes=3).episode_seeds() == [0, 1, 2]


def test_eval_report_serialization():
    report = evaluate(None, None, _cfg(n_episodes=2))
    obj = report.to_json()
    assert set(obj) == {"tc_percent", "avg_hi", "n_episodes", "traces"}
    assert obj["n_episodes"] == 2
    assert obj["traces"][0]["macros"][0]["t"] == 0
    assert isinstance(obj["traces"][0]["success"], bool)
