import pytest
from hypothesis import given, strategies as st

from gridcmd import grammar
from gridcmd.grammar import (
    BOS,
    EOS,
    PAD,
    Color,
    GO_TO_GOAL,
    GoalKind,
    Instruction,
    NonGrammatical,
    SubGoal,
    UnknownToken,
    VOCAB,
    all_subgoals,
    detokenize,
    open_door,
    parse,
    pick_up_key,
    render,
    tokenize,
)


def test_vocab_is_frozen():
    expected = {
        "<pad>": 0, "<bos>": 1, "<eos>": 2, "open": 3, "the": 4, "pick": 5,
        "up": 6, "go": 7, "to": 8, "goal": 9, "door": 10, "key": 11,
        "yellow": 12, "red": 13, "blue": 14, "green": 15, "purple": 16,
        "grey": 17,
    }
    assert VOCAB == expected
    assert len(VOCAB) == 18


def test_color_ordinals_fixed():
    assert [c.word for c in Color] == ["red", "green", "blue", "purple", "yellow", "grey"]
    assert [int(c) for c in Color] == [0, 1, 2, 3, 4, 5]


def test_render_table_sentences():
    assert render(open_door(Color.YELLOW)).text == "open the yellow door"
    assert render(pick_up_key(Color.BLUE)).text == "pick up the blue key"
    assert render(GO_TO_GOAL).text == "go to the goal"


def test_parse_examples():
    assert parse("open the yellow door") == open_door(Color.YELLOW)
    assert parse("Open  THE yellow door") == open_door(Color.YELLOW)
    with pytest.raises(NonGrammatical):
        parse("open the yellow key")


def test_all_13_subgoals_round_trip():
    goals = all_subgoals()
    assert len(goals) == 13
    for g in goals:
        assert parse(render(g).text) == g


def test_render_parse_is_normalizing_inverse():
    for g in all_subgoals():
        text = render(g).text
        assert render(parse("  " + text.upper() + " ")).text == text


def test_tokenize_examples():
    assert tokenize("go to the goal") == [7, 8, 4, 9]
    assert detokenize([3, 4, 12, 10]) == "open the yellow door"
    with pytest.raises(UnknownToken):
        tokenize("open the cyan door")


def test_detokenize_strips_special_tokens():
    assert detokenize([BOS, 3, 4, 12, 10, EOS, PAD, PAD]) == "open the yellow door"


def test_tokenize_detokenize_round_trip():
    for g in all_subgoals():
        text = render(g).text
        assert detokenize(tokenize(text)) == text
        assert len(text.split()) <= grammar.MAX_WORDS


def test_subgoal_validation():
    with pytest.raises(ValueError):
        SubGoal(GoalKind.GO_TO_GOAL, Color.RED)
    with pytest.raises(ValueError):
        SubGoal(GoalKind.OPEN_DOOR)


def test_subgoal_json_round_trip():
    for g in all_subgoals():
        assert SubGoal.from_json(g.to_json()) == g
    assert open_door(Color.YELLOW).to_json() == {"kind": "open_door", "color": "yellow"}
    assert GO_TO_GOAL.to_json() == {"kind": "go_to_goal"}


GRAMMATICAL = {render(g).text for g in all_subgoals()}
WORDS = [w for w in VOCAB if not w.startswith("<")] + ["cyan", "box", "lever", "a"]


@given(st.lists(st.sampled_from(WORDS), min_size=0, max_size=6))
def test_parse_rejects_everything_outside_the_language(words):
    text = " ".join(words)
    if text in GRAMMATICAL:
        assert parse(text) == parse(text)
    else:
        with pytest.raises(NonGrammatical):
            parse(text)


@given(st.text(max_size=40))
def test_parse_never_crashes_on_arbitrary_text(text):
    try:
        g = parse(text)
    except NonGrammatical:
        return
    assert render(g).text == grammar.normalize(text)


def test_instruction_tokens_match_text():
    for g in all_subgoals():
        ins = render(g)
        assert isinstance(ins, Instruction)
        assert list(ins.tokens) == tokenize(ins.text)
