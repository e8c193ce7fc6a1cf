"""Membership checks for layered grammars (CYK stratified by level)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from ._accel import use_numba
from .grammar import ConcreteGrammar, GrammarError

__all__ = ["accepts", "accepts_many", "accepts_reference", "GAResult", "grammatical_accuracy"]


def _as_indices(cg: ConcreteGrammar, terminals: Sequence) -> np.ndarray:
    if len(terminals) == 0:
        raise GrammarError("empty string: the grammar cannot derive the empty sequence")
    if all(isinstance(t, str) for t in terminals):
        return cg.encode(terminals)
    arr = np.asarray(terminals, dtype=np.int64)
    if arr.min() < 0 or arr.max() >= len(cg.terminals):
        bad = int(arr[(arr < 0) | (arr >= len(cg.terminals))][0])
        raise GrammarError(f"unknown terminal index {bad}")
    return arr


def _kernel_args(cg: ConcreteGrammar):
    t = cg.tables
    return t.level_offset, t.rule_start, t.rule_count, t.rule_rhs, t.rule_arity


def accepts(cg: ConcreteGrammar, terminals: Sequence, backend: str | None = None) -> bool:
    """True iff the root derives ``terminals`` (names or terminal indices).

    Unknown tokens raise :class:`GrammarError`; they are not a rejection.
    """
    toks = _as_indices(cg, terminals)
    n = len(toks)
    if n < 2**cg.depth or n > 3**cg.depth:
        return False
    return bool(accepts_many(cg, [toks], backend=backend)[0])


def accepts_many(cg: ConcreteGrammar, strings: Sequence[Sequence[int]], backend: str | None = None) -> np.ndarray:
    """Vector of verdicts for strings given as terminal indices."""
    if not strings:
        return np.zeros(0, dtype=bool)
    lengths = np.array([len(s) for s in strings], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in strings]) if lengths.sum() else np.zeros(0, np.int64)
    backend = backend or ("numba" if use_numba() else "numpy")
    kernel = _kernels.cyk_batch_nb if backend == "numba" else _kernels.cyk_batch_np
    return np.asarray(kernel(flat, offsets, *_kernel_args(cg)), dtype=bool)


def accepts_reference(cg: ConcreteGrammar, terminals: Sequence) -> bool:
    """Direct recursion over split points (two for ternary rules), O(n^4).

    Kept only to cross-check the chart kernels.
    """
    toks = tuple(int(t) for t in _as_indices(cg, terminals))
    names = cg.terminals
    depth = cg.depth
    level = cg.symbol_level

    @lru_cache(maxsize=None)
    def derives(sym: str, a: int, b: int) -> bool:
        i = level[sym]
        if i == depth:
            return b - a == 1 and names[toks[a]] == sym
        width = depth - i
        if not 2**width <= b - a <= 3**width:
            return False
        for r in cg.rules_for(sym):
            if len(r.rhs) == 2:
                u, v = r.rhs
                if any(derives(u, a, c) and derives(v, c, b) for c in range(a + 1, b)):
                    return True
            else:
                u, v, w = r.rhs
                for c in range(a + 1, b - 1):
                    if not derives(u, a, c):
                        continue
                    if any(derives(v, c, e) and derives(w, e, b) for e in range(c + 1, b)):
                        return True
        return False

    return derives(cg.root, 0, len(toks))


@dataclass(frozen=True)
class GAResult:
    accuracy: float
    stderr: float  # binomial standard error sqrt(p(1-p)/n)
    n: int
    verdicts: tuple[bool, ...]


def grammatical_accuracy(
    cg: ConcreteGrammar, completions: Sequence[Sequence[int]], backend: str | None = None
) -> GAResult:
    if len(completions) == 0:
        raise ValueError("grammatical_accuracy needs at least one completion")
    verdicts = np.zeros(len(completions), dtype=bool)
    nonempty = [k for k, c in enumerate(completions) if len(c) > 0]
    if nonempty:
        verdicts[nonempty] = accepts_many(cg, [completions[k] for k in nonempty], backend=backend)
    n = len(verdicts)
    p = float(verdicts.mean())
    return GAResult(p, math.sqrt(p * (1 - p) / n), n, tuple(bool(v) for v in verdicts))
