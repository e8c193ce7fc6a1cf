"""Exact computations on small grammars by brute-force enumeration.

Everything here is a finite sum: the language of a concrete grammar is
enumerated with exact string probabilities (uniform rule choice per lhs), and
prefix probabilities are sums over the enumerated strings. Used as ground
truth for the sampler, the verifier, the metrics and the trained models.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .grammar import ConcreteGrammar, GrammarError, HierarchicalGrammar, all_metadata, instantiate

__all__ = [
    "BudgetExceeded",
    "ImpossiblePrefix",
    "WeightedLanguage",
    "count_derivations",
    "enumerate_language",
    "enumerate_language_exact",
    "uniform_prior",
    "marginal_language",
    "metadata_posterior",
    "exact_next_token",
    "next_token_direct",
    "Oracle",
    "bayes_ga_upper_reference",
]

DEFAULT_BUDGET = 10**6


class BudgetExceeded(GrammarError):
    pass


class ImpossiblePrefix(ValueError):
    pass


Prefix = tuple[int, ...]


@dataclass
class WeightedLanguage:
    """Exact distribution over terminal strings (tuples of terminal indices)."""

    probs: dict[tuple[int, ...], float]
    n_terminals: int
    _prefix: dict[Prefix, float] | None = field(default=None, repr=False)

    @property
    def support(self) -> set[tuple[int, ...]]:
        return {s for s, p in self.probs.items() if p > 0}

    def total(self) -> float:
        return math.fsum(self.probs.values())

    def prob(self, s: Sequence[int]) -> float:
        return self.probs.get(tuple(s), 0.0)

    def prefix_mass(self, prefix: Sequence[int]) -> float:
        """P(string starts with ``prefix``), the string itself included."""
        if self._prefix is None:
            acc: dict[Prefix, list[float]] = {}
            for s, p in self.probs.items():
                for k in range(len(s) + 1):
                    acc.setdefault(s[:k], []).append(p)
            self._prefix = {k: math.fsum(v) for k, v in acc.items()}
        return self._prefix.get(tuple(prefix), 0.0)

    def next_token(self, prefix: Sequence[int]) -> np.ndarray:
        """Continuation distribution; index ``n_terminals`` is EOS."""
        prefix = tuple(prefix)
        z = self.prefix_mass(prefix)
        if z <= 0:
            raise ImpossiblePrefix(f"prefix {prefix} has zero probability")
        out = np.empty(self.n_terminals + 1)
        for t in range(self.n_terminals):
            out[t] = self.prefix_mass(prefix + (t,)) / z
        out[-1] = self.prob(prefix) / z
        return out


def count_derivations(cg: ConcreteGrammar) -> int:
    @lru_cache(maxsize=None)
    def count(sym: str) -> int:
        if cg.symbol_level[sym] == cg.depth:
            return 1
        return sum(math.prod(count(c) for c in r.rhs) for r in cg.rules_for(sym))

    return count(cg.root)


def _check_budget(cg: ConcreteGrammar, budget: int) -> None:
    n = count_derivations(cg)
    if n > budget:
        raise BudgetExceeded(f"grammar has {n} derivations, above the enumeration budget of {budget}")


def _enumerate(cg: ConcreteGrammar, one, scale):
    term = cg.terminal_index
    memo: dict[str, dict[tuple[int, ...], object]] = {}

    def lang(sym: str):
        if sym in memo:
            return memo[sym]
        if cg.symbol_level[sym] == cg.depth:
            out = {(term[sym],): one}
        else:
            rules = cg.rules_for(sym)
            w = scale(len(rules))
            out = {}
            for r in rules:
                parts = [lang(c).items() for c in r.rhs]
                for combo in itertools.product(*parts):
                    s = tuple(itertools.chain.from_iterable(x for x, _ in combo))
                    p = w
                    for _, q in combo:
                        p = p * q
                    out[s] = out.get(s, 0) + p
        memo[sym] = out
        return out

    return lang(cg.root)


@lru_cache(maxsize=256)
def _enumerate_cached(cg: ConcreteGrammar, budget: int) -> WeightedLanguage:
    _check_budget(cg, budget)
    probs = _enumerate(cg, 1.0, lambda k: 1.0 / k)
    return WeightedLanguage(probs, len(cg.terminals))


def enumerate_language(cg: ConcreteGrammar, budget: int = DEFAULT_BUDGET) -> WeightedLanguage:
    """All strings of ``cg`` with exact probabilities (merged over derivations)."""
    return _enumerate_cached(cg, budget)


def enumerate_language_exact(cg: ConcreteGrammar, budget: int = DEFAULT_BUDGET) -> dict[tuple[int, ...], Fraction]:
    """Rational-arithmetic twin of :func:`enumerate_language`."""
    _check_budget(cg, budget)
    return _enumerate(cg, Fraction(1), lambda k: Fraction(1, k))


def uniform_prior(g: HierarchicalGrammar) -> dict[tuple[int, ...], float]:
    ms = all_metadata(g)
    return {m: 1.0 / len(ms) for m in ms}


def _prior(g: HierarchicalGrammar, prior: Mapping | None) -> dict[tuple[int, ...], float]:
    if prior is None:
        return uniform_prior(g)
    return {g.check_metadata(m): float(p) for m, p in prior.items()}


def marginal_language(
    g: HierarchicalGrammar, prior: Mapping | None = None, budget: int = DEFAULT_BUDGET
) -> WeightedLanguage:
    """Distribution of the full generative process: sum_m prior(m) P(. | G(m))."""
    acc: dict[tuple[int, ...], list[float]] = {}
    for m, pm in _prior(g, prior).items():
        if pm == 0:
            continue
        for s, p in enumerate_language(instantiate(g, m), budget).probs.items():
            acc.setdefault(s, []).append(pm * p)
    return WeightedLanguage({s: math.fsum(v) for s, v in acc.items()}, len(g.terminals))


def metadata_posterior(
    g: HierarchicalGrammar, prefix: Sequence[int], prior: Mapping | None = None, budget: int = DEFAULT_BUDGET
) -> dict[tuple[int, ...], float]:
    """p(m | x) for an observed terminal prefix ``x``."""
    prefix = tuple(prefix)
    pri = _prior(g, prior)
    joint = {}
    for m, pm in pri.items():
        if pm == 0:
            continue
        lik = enumerate_language(instantiate(g, m), budget).prefix_mass(prefix)
        if lik > 0:
            joint[m] = pm * lik
    z = math.fsum(joint.values())
    if z <= 0:
        raise ImpossiblePrefix(f"prefix {prefix} has zero likelihood under every metadata vector")
    return {m: v / z for m, v in joint.items()}


def exact_next_token(
    g: HierarchicalGrammar, prefix: Sequence[int], prior: Mapping | None = None, budget: int = DEFAULT_BUDGET
) -> np.ndarray:
    """Bayes predictor sum_m p(y | x, G(m)) p(m | x); last entry is EOS."""
    post = metadata_posterior(g, prefix, prior, budget)
    out = np.zeros(len(g.terminals) + 1)
    for m, pm in sorted(post.items()):
        out += pm * enumerate_language(instantiate(g, m), budget).next_token(prefix)
    return out


def next_token_direct(
    g: HierarchicalGrammar, prefix: Sequence[int], prior: Mapping | None = None, budget: int = DEFAULT_BUDGET
) -> np.ndarray:
    """p(y | x) read straight off the marginal language, no posterior involved."""
    return _marginal_cached(g, _freeze(prior), budget).next_token(prefix)


def _freeze(prior: Mapping | None):
    return None if prior is None else tuple(sorted((tuple(m), float(p)) for m, p in prior.items()))


@lru_cache(maxsize=32)
def _marginal_cached(g: HierarchicalGrammar, prior, budget: int) -> WeightedLanguage:
    return marginal_language(g, dict(prior) if prior is not None else None, budget)


class Oracle:
    """Cached exact predictor for one hierarchical grammar under a uniform prior.

    ``next_token`` answers from the marginal language; the per-metadata
    languages are kept for posterior queries.
    """

    def __init__(self, g: HierarchicalGrammar, budget: int = DEFAULT_BUDGET):
        self.g = g
        self.budget = budget
        self.marginal = marginal_language(g, budget=budget)
        self.eos = len(g.terminals)

    def next_token(self, prefix: Sequence[int]) -> np.ndarray:
        return self.marginal.next_token(prefix)

    def posterior(self, prefix: Sequence[int]) -> dict[tuple[int, ...], float]:
        return metadata_posterior(self.g, prefix, budget=self.budget)

    def sequence_distributions(self, sentence: Sequence[int]) -> np.ndarray:
        """Next-token distributions after each prefix of ``sentence``; (len + 1, T + 1)."""
        s = tuple(sentence)
        return np.stack([self.next_token(s[:k]) for k in range(len(s) + 1)])

    def entropy_rate(self) -> float:
        """Expected per-token (terminals + EOS) conditional entropy in nats."""
        h, n = 0.0, 0.0
        for s, p in self.marginal.probs.items():
            dist = self.sequence_distributions(s)
            targets = list(s) + [self.eos]
            h += p * -sum(math.log(dist[k, t]) for k, t in enumerate(targets))
            n += p * len(targets)
        return h / n


def bayes_ga_upper_reference(
    g: HierarchicalGrammar,
    prompt_lengths: Sequence[int],
    n: int = 500,
    seed: int = 0,
    predictor: HierarchicalGrammar | None = None,
):
    """GA table with the exact Bayes predictor as generator.

    Equals 1.0 everywhere when ``predictor`` is ``g`` (the default), which
    makes it a self-test of the GA pipeline. Passing another grammar as
    ``predictor`` gives a negative control.
    """
    from .eval import OracleGenerator, ga_sweep

    return ga_sweep(OracleGenerator(g, seed, g_for_prediction=predictor), g, prompt_lengths, n, seed)
