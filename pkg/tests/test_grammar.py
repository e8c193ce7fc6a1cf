import itertools

import pytest

from metacfg.grammar import (
    GrammarError,
    GrammarParseError,
    all_metadata,
    instantiate,
    load_grammar,
    mixture,
    parse_grammar,
    random_grammar,
    to_text,
)
from metacfg.oracle import enumerate_language

FIG21_SUPPORT = {"0001", "00101", "11101", "111101"}

BASE = """
depth: 2
level 0: S
level 1: A B
level 2: 0 1
rules level=0 choice=0:
  S -> A B
rules level=1 choice=0:
  A -> 0 0
  B -> 0 1
"""


def strings(lang, g):
    return {"".join(g.terminals[t] for t in s) for s in lang.support}


def test_fig21_shape(fig21):
    assert fig21.depth == 2
    assert fig21.n_choices == (2, 2)
    assert fig21.levels == (("S",), ("A", "B"), ("0", "1"))


def test_instantiate_fig21_support(fig21):
    cg = instantiate(fig21, (0, 1))
    assert [rs.choice for rs in cg.rulesets] == [0, 1]
    assert strings(enumerate_language(cg), fig21) == FIG21_SUPPORT


def test_instantiate_zeros_is_canonical(fig21, toy_b):
    for g in (fig21, toy_b):
        cg = instantiate(g, (0,) * g.depth)
        assert all(rs is g.choices[i][0] for i, rs in enumerate(cg.rulesets))


def test_instantiate_out_of_range(fig21):
    with pytest.raises(GrammarError, match="out of range"):
        instantiate(fig21, (0, 2))
    with pytest.raises(GrammarError, match="length"):
        instantiate(fig21, (0,))


def test_instantiate_is_deterministic(fig21):
    assert instantiate(fig21, (1, 0)) == instantiate(fig21, (1, 0))


def test_mixture_rule_counts(fig21):
    mx = mixture(fig21)
    assert len(mx.rulesets[0].rules) == 4
    assert len(mx.rulesets[1].rules) == 4


def test_mixture_contains_every_instantiation_rule(fig21, toy_a, toy_b):
    for g in (fig21, toy_a, toy_b):
        mx = mixture(g)
        for m in all_metadata(g):
            for i, rs in enumerate(instantiate(g, m).rulesets):
                assert set(rs.rules) <= set(mx.rulesets[i].rules)


def test_mixture_single_choice_degenerate():
    g = parse_grammar(BASE)
    assert mixture(g).rulesets == instantiate(g, (0, 0)).rulesets


def test_mixture_language_contains_instantiations(fig21):
    # enumeration covers all strings here (max length 3^2 = 9 <= 10)
    mix = enumerate_language(mixture(fig21)).support
    for m in all_metadata(fig21):
        assert enumerate_language(instantiate(fig21, m)).support <= mix


def test_round_trip_text(fig21):
    assert parse_grammar(to_text(fig21)) == fig21


def test_load_grammar_from_file(tmp_path, fig21):
    p = tmp_path / "g.cfg"
    p.write_text(to_text(fig21))
    assert load_grammar(p) == fig21
    assert load_grammar("fig21") == fig21


@pytest.mark.parametrize(
    "bad, message",
    [
        (BASE.replace("  B -> 0 1\n", ""), "symbol B at level 1 has no rule in R_{1,0}"),
        (BASE.replace("A -> 0 0", "A -> 0 B"), "rhs symbol B is at level 1, expected 2"),
        (BASE.replace("A -> 0 0", "A -> 0"), "rhs length 1"),
        (BASE.replace("A -> 0 0", "A -> 0 0 1 1"), "rhs length 4"),
        (BASE.replace("level 2: 0 1", "level 2: 0 1 A"), "levels must be disjoint"),
        (BASE.replace("A -> 0 0", "A -> 0 7"), "unknown symbol 7"),
        (BASE.replace("level 0: S", "level 0: S T"), "exactly one root"),
    ],
)
def test_validation_errors(bad, message):
    with pytest.raises(GrammarError) as e:
        parse_grammar(bad)
    assert message in str(e.value)


@pytest.mark.parametrize(
    "bad, line",
    [
        (BASE.replace("depth: 2", "depth: two"), 2),
        (BASE.replace("S -> A B", "S A B"), 7),
        ("level 0: S\n  S -> A\n", 2),
    ],
)
def test_parse_errors_carry_line(bad, line):
    with pytest.raises(GrammarParseError) as e:
        parse_grammar(bad)
    assert e.value.line == line


def test_parse_rejects_gapped_choices():
    with pytest.raises(GrammarParseError, match="numbered"):
        parse_grammar(BASE.replace("rules level=1 choice=0", "rules level=1 choice=1"))


def test_comments_ignored():
    g = parse_grammar("# header\n" + BASE.replace("S -> A B", "S -> A B   # root rule"))
    assert g.choices[0][0].rules[0].rhs == ("A", "B")


def test_duplicate_rules_across_choices_are_kept_until_mixture():
    text = BASE + "rules level=1 choice=1:\n  A -> 0 0\n  B -> 1 1\n"
    g = parse_grammar(text)
    assert len(g.choices[1][1].rules) == 2
    assert len(mixture(g).rulesets[1].rules) == 3


def test_random_grammar_is_valid():
    g = random_grammar(3, (3, 3, 3), seed=4)
    assert g.n_choices == (2, 2, 2)
    for i, j in itertools.product(range(3), range(2)):
        assert {r.lhs for r in g.choices[i][j].rules} == set(g.levels[i])


def test_tables_layout(fig21):
    t = instantiate(fig21, (0, 1)).tables
    assert t.level_offset.tolist() == [0, 1, 3, 5]
    assert t.rule_count.tolist() == [1, 2, 2, 0, 0]
    assert t.n_terminals == 2
