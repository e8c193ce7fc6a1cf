"""Layered (D-level) PCFGs with per-level rule-set choices.

A :class:`HierarchicalGrammar` holds every rule-set choice ``R[i][j]``; a
metadata vector ``(j_0, ..., j_{D-1})`` picks one rule set per level and yields
a :class:`ConcreteGrammar`. Rule probabilities are uniform per left-hand side.

Grammar files are plain text::

    # comments start with '#'
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

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GrammarError",
    "GrammarParseError",
    "Rule",
    "RuleSet",
    "HierarchicalGrammar",
    "ConcreteGrammar",
    "GrammarTables",
    "parse_grammar",
    "load_grammar",
    "load_preset",
    "instantiate",
    "mixture",
    "all_metadata",
    "random_grammar",
]


class GrammarError(ValueError):
    """Structural problem with a grammar (bad level, uncovered symbol, ...)."""


class GrammarParseError(GrammarError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]

    def __str__(self) -> str:
        return f"{self.lhs} -> {' '.join(self.rhs)}"


@dataclass(frozen=True)
class RuleSet:
    level: int
    choice: int
    rules: tuple[Rule, ...]

    def rules_for(self, lhs: str) -> tuple[Rule, ...]:
        return tuple(r for r in self.rules if r.lhs == lhs)


def _validate_symbols(levels: Sequence[Sequence[str]]) -> dict[str, int]:
    if len(levels) < 2:
        raise GrammarError("a grammar needs depth >= 1 (at least two levels)")
    if len(levels[0]) != 1:
        raise GrammarError(f"level 0 must hold exactly one root symbol, got {list(levels[0])}")
    where: dict[str, int] = {}
    for i, syms in enumerate(levels):
        if not syms:
            raise GrammarError(f"level {i} declares no symbols")
        for s in syms:
            if s in where:
                if where[s] == i:
                    raise GrammarError(f"symbol {s} declared twice at level {i}")
                raise GrammarError(f"symbol {s} declared at levels {where[s]} and {i}; levels must be disjoint")
            where[s] = i
    return where


def _validate_ruleset(rs: RuleSet, levels: Sequence[Sequence[str]], where: dict[str, int]) -> None:
    tag = f"R_{{{rs.level},{rs.choice}}}"
    for r in rs.rules:
        if r.lhs not in where:
            raise GrammarError(f"rule {r} in {tag}: unknown symbol {r.lhs}")
        if where[r.lhs] != rs.level:
            raise GrammarError(f"rule {r} in {tag}: lhs {r.lhs} is at level {where[r.lhs]}, not {rs.level}")
        if len(r.rhs) not in (2, 3):
            raise GrammarError(f"rule {r} in {tag}: rhs length {len(r.rhs)} not in {{2, 3}}")
        for s in r.rhs:
            if s not in where:
                raise GrammarError(f"rule {r} in {tag}: unknown symbol {s}")
            if where[s] != rs.level + 1:
                raise GrammarError(
                    f"rule {r} in {tag}: rhs symbol {s} is at level {where[s]}, expected {rs.level + 1}"
                )
    covered = {r.lhs for r in rs.rules}
    for s in levels[rs.level]:
        if s not in covered:
            raise GrammarError(f"symbol {s} at level {rs.level} has no rule in {tag}")


@dataclass(frozen=True)
class GrammarTables:
    """Flat integer view of a concrete grammar for the numeric kernels.

    Symbols get dense global ids in level order. For symbol ``s`` its rules
    are ``rule_rhs[rule_start[s] : rule_start[s] + rule_count[s]]``; unused
    rhs slots hold -1.
    """

    level_offset: np.ndarray  # (D + 2,), level i owns ids [off[i], off[i+1])
    rule_start: np.ndarray  # (n_symbols,)
    rule_count: np.ndarray  # (n_symbols,)
    rule_rhs: np.ndarray  # (n_rules, 3)
    rule_arity: np.ndarray  # (n_rules,)
    rule_lhs: np.ndarray  # (n_rules,)

    @property
    def depth(self) -> int:
        return len(self.level_offset) - 2

    @property
    def n_terminals(self) -> int:
        return int(self.level_offset[-1] - self.level_offset[-2])


class _GrammarBase:
    depth: int
    levels: tuple[tuple[str, ...], ...]

    @property
    def root(self) -> str:
        return self.levels[0][0]

    @property
    def terminals(self) -> tuple[str, ...]:
        return self.levels[self.depth]

    @cached_property
    def symbol_level(self) -> dict[str, int]:
        return {s: i for i, syms in enumerate(self.levels) for s in syms}

    @cached_property
    def symbol_index(self) -> dict[str, int]:
        """Dense global id per symbol, in level order."""
        return {s: k for k, s in enumerate(itertools.chain.from_iterable(self.levels))}

    @cached_property
    def terminal_index(self) -> dict[str, int]:
        return {s: k for k, s in enumerate(self.terminals)}


@dataclass(frozen=True, eq=True)
class HierarchicalGrammar(_GrammarBase):
    depth: int
    levels: tuple[tuple[str, ...], ...]
    choices: tuple[tuple[RuleSet, ...], ...]
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.depth != len(self.levels) - 1:
            raise GrammarError(f"depth {self.depth} but {len(self.levels)} symbol levels declared")
        if len(self.choices) != self.depth:
            raise GrammarError(f"expected rule sets for {self.depth} levels, got {len(self.choices)}")
        where = _validate_symbols(self.levels)
        for i, sets in enumerate(self.choices):
            if not sets:
                raise GrammarError(f"level {i} has no rule-set choices")
            for j, rs in enumerate(sets):
                if rs.level != i or rs.choice != j:
                    raise GrammarError(f"rule set R_{{{rs.level},{rs.choice}}} stored at slot ({i},{j})")
                _validate_ruleset(rs, self.levels, where)

    @property
    def n_choices(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.choices)

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()

    def check_metadata(self, metadata: Sequence[int]) -> tuple[int, ...]:
        m = tuple(int(j) for j in metadata)
        if len(m) != self.depth:
            raise GrammarError(f"metadata {m} has length {len(m)}, grammar depth is {self.depth}")
        for i, (j, c) in enumerate(zip(m, self.n_choices)):
            if not 0 <= j < c:
                raise GrammarError(f"metadata index j_{i}={j} out of range [0, {c})")
        return m


@dataclass(frozen=True, eq=True)
class ConcreteGrammar(_GrammarBase):
    depth: int
    levels: tuple[tuple[str, ...], ...]
    rulesets: tuple[RuleSet, ...]
    metadata: tuple[int, ...] | None = None  # None for the mixture grammar

    def __post_init__(self) -> None:
        where = _validate_symbols(self.levels)
        if len(self.rulesets) != self.depth:
            raise GrammarError(f"expected {self.depth} rule sets, got {len(self.rulesets)}")
        for rs in self.rulesets:
            _validate_ruleset(rs, self.levels, where)

    def rules_for(self, lhs: str) -> tuple[Rule, ...]:
        return self._by_lhs[lhs]

    @cached_property
    def _by_lhs(self) -> dict[str, tuple[Rule, ...]]:
        out: dict[str, list[Rule]] = {}
        for rs in self.rulesets:
            for r in rs.rules:
                out.setdefault(r.lhs, []).append(r)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def tables(self) -> GrammarTables:
        idx = self.symbol_index
        n_sym = len(idx)
        offs = np.zeros(self.depth + 2, dtype=np.int64)
        for i, syms in enumerate(self.levels):
            offs[i + 1] = offs[i] + len(syms)
        start = np.zeros(n_sym, dtype=np.int64)
        count = np.zeros(n_sym, dtype=np.int64)
        rhs, arity, lhs = [], [], []
        for s, k in idx.items():
            rules = self._by_lhs.get(s, ())
            start[k] = len(rhs)
            count[k] = len(rules)
            for r in rules:
                ids = [idx[x] for x in r.rhs]
                rhs.append(ids + [-1] * (3 - len(ids)))
                arity.append(len(ids))
                lhs.append(k)
        return GrammarTables(
            level_offset=offs,
            rule_start=start,
            rule_count=count,
            rule_rhs=np.asarray(rhs, dtype=np.int64).reshape(-1, 3),
            rule_arity=np.asarray(arity, dtype=np.int64),
            rule_lhs=np.asarray(lhs, dtype=np.int64),
        )

    def encode(self, terminals: Iterable[str]) -> np.ndarray:
        """Terminal names to terminal indices; raises on unknown tokens."""
        ti = self.terminal_index
        out = []
        for t in terminals:
            if t not in ti:
                raise GrammarError(f"unknown terminal {t!r}")
            out.append(ti[t])
        return np.asarray(out, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.terminals[int(k)] for k in ids]


def instantiate(g: HierarchicalGrammar, m: Sequence[int]) -> ConcreteGrammar:
    """Select ``R[i][m[i]]`` at every level."""
    m = g.check_metadata(m)
    return ConcreteGrammar(g.depth, g.levels, tuple(g.choices[i][j] for i, j in enumerate(m)), m)


def mixture(g: HierarchicalGrammar) -> ConcreteGrammar:
    """Level-wise union of all rule-set choices, duplicates removed (first occurrence kept)."""
    sets = []
    for i, choices in enumerate(g.choices):
        rules = tuple(dict.fromkeys(r for rs in choices for r in rs.rules))
        sets.append(RuleSet(i, 0, rules))
    return ConcreteGrammar(g.depth, g.levels, tuple(sets), None)


def all_metadata(g: HierarchicalGrammar) -> list[tuple[int, ...]]:
    return list(itertools.product(*(range(c) for c in g.n_choices)))


_LEVEL_RE = re.compile(r"^level\s+(\d+)\s*:(.*)$")
_RULES_RE = re.compile(r"^rules\s+level\s*=\s*(\d+)\s+choice\s*=\s*(\d+)\s*:\s*$")
_DEPTH_RE = re.compile(r"^depth\s*:\s*(\S+)\s*$")


def parse_grammar(text: str, name: str = "") -> HierarchicalGrammar:
    depth = None
    levels: dict[int, tuple[str, ...]] = {}
    blocks: dict[tuple[int, int], list[Rule]] = {}
    current: tuple[int, int] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if mo := _DEPTH_RE.match(line):
            if depth is not None:
                raise GrammarParseError("duplicate depth header", lineno)
            try:
                depth = int(mo.group(1))
            except ValueError:
                raise GrammarParseError(f"depth must be an integer, got {mo.group(1)!r}", lineno) from None
            if depth < 1:
                raise GrammarParseError(f"depth must be >= 1, got {depth}", lineno)
            current = None
        elif mo := _LEVEL_RE.match(line):
            i = int(mo.group(1))
            if i in levels:
                raise GrammarParseError(f"level {i} declared twice", lineno)
            levels[i] = tuple(mo.group(2).split())
            current = None
        elif mo := _RULES_RE.match(line):
            key = (int(mo.group(1)), int(mo.group(2)))
            if key in blocks:
                raise GrammarParseError(f"duplicate rule block level={key[0]} choice={key[1]}", lineno)
            blocks[key] = []
            current = key
        elif "->" in line:
            if current is None:
                raise GrammarParseError("rule outside a 'rules level=i choice=j:' block", lineno)
            lhs, _, rhs = line.partition("->")
            lhs_toks = lhs.split()
            if len(lhs_toks) != 1:
                raise GrammarParseError(f"rule lhs must be one symbol, got {lhs.strip()!r}", lineno)
            blocks[current].append(Rule(lhs_toks[0], tuple(rhs.split())))
        else:
            raise GrammarParseError(f"cannot parse {line!r}", lineno)

    if depth is None:
        raise GrammarParseError("missing 'depth: D' header")
    if sorted(levels) != list(range(depth + 1)):
        raise GrammarParseError(f"expected symbol declarations for levels 0..{depth}, got {sorted(levels)}")
    for (i, _) in blocks:
        if not 0 <= i < depth:
            raise GrammarParseError(f"rule block for level {i} outside [0, {depth})")
    choices = []
    for i in range(depth):
        js = sorted(j for (lv, j) in blocks if lv == i)
        if not js:
            raise GrammarParseError(f"no rule blocks for level {i}")
        if js != list(range(len(js))):
            raise GrammarParseError(f"choices at level {i} must be numbered 0..{len(js) - 1}, got {js}")
        choices.append(tuple(RuleSet(i, j, tuple(blocks[(i, j)])) for j in js))
    return HierarchicalGrammar(depth, tuple(levels[i] for i in range(depth + 1)), tuple(choices), name=name)


def load_grammar(path: str | Path) -> HierarchicalGrammar:
    """Read a grammar file, or a preset name such as ``fig21`` / ``desk3``."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return load_preset(str(path))
    return parse_grammar(p.read_text(encoding="utf-8"), name=p.stem)


PRESETS = ("fig21", "desk3", "toy_a", "toy_b")


def load_preset(name: str) -> HierarchicalGrammar:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("metacfg.grammars").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    return parse_grammar(text, name=name)


def to_text(g: HierarchicalGrammar) -> str:
    lines = [f"depth: {g.depth}"]
    lines += [f"level {i}: {' '.join(syms)}" for i, syms in enumerate(g.levels)]
    for sets in g.choices:
        for rs in sets:
            lines.append(f"rules level={rs.level} choice={rs.choice}:")
            lines += [f"  {r}" for r in rs.rules]
    return "\n".join(lines) + "\n"


def random_grammar(
    depth: int,
    symbols_per_level: Sequence[int],
    rules_per_symbol: int = 2,
    n_choices: int = 2,
    seed: int = 0,
    terminal_names: Sequence[str] | None = None,
) -> HierarchicalGrammar:
    """Random layered grammar, every rule set covering every symbol.

    ``symbols_per_level`` lists sizes for levels 1..D (level 0 is the root).
    Rule sets at one level are drawn independently, so choices rarely share rules.
    """
    if len(symbols_per_level) != depth:
        raise GrammarError("symbols_per_level needs one entry per level 1..D")
    rng = np.random.default_rng(seed)
    levels: list[tuple[str, ...]] = [("S",)]
    for i, n in enumerate(symbols_per_level, start=1):
        if i == depth and terminal_names is not None:
            levels.append(tuple(terminal_names))
        elif i == depth:
            levels.append(tuple(str(k + 1) for k in range(n)))
        else:
            levels.append(tuple(f"{chr(ord('A') + i - 1)}{k}" for k in range(n)))
    choices = []
    for i in range(depth):
        below = levels[i + 1]
        sets = []
        for j in range(n_choices):
            rules: list[Rule] = []
            for s in levels[i]:
                seen: set[tuple[str, ...]] = set()
                while len(seen) < rules_per_symbol:
                    k = int(rng.integers(2, 4))
                    rhs = tuple(below[int(x)] for x in rng.integers(0, len(below), size=k))
                    if rhs not in seen:
                        seen.add(rhs)
                        rules.append(Rule(s, rhs))
            sets.append(RuleSet(i, j, tuple(rules)))
        choices.append(tuple(sets))
    return HierarchicalGrammar(depth, tuple(levels), tuple(choices))
