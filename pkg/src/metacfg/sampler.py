"""Ancestral sampling from layered grammars.

Every sentence owns a SplitMix64 stream (see :mod:`metacfg._kernels`); item
``k`` of a batch uses ``stream_seed(base_seed, k)``, so batches are
reproducible and items do not depend on each other. Within a stream the
metadata indices are drawn first (one per level), then one draw per expanded
symbol, level by level and left to right.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from ._accel import use_numba
from .grammar import ConcreteGrammar, GrammarError, HierarchicalGrammar, instantiate

__all__ = [
    "SplitMix64",
    "SampledSentence",
    "SentenceBatch",
    "stream_seed",
    "sample_metadata",
    "sample_sentence",
    "sample_batch",
    "sample_arrays",
    "write_sidecar",
    "read_sidecar",
]

GENERATOR_VERSION = "metacfg-sampler/1"


class SplitMix64:
    """Counter-mode SplitMix64 stream. Single owner; not thread safe."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _kernels.MASK64
        self.counter = counter

    def next64(self) -> int:
        self.counter += 1
        return _kernels.mix64_int(self.seed + self.counter * 0x9E3779B97F4A7C15)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        return ((self.next64() >> 11) * n) >> 53

    def random(self) -> float:
        return (self.next64() >> 11) * 2.0**-53

    def spawn(self, k: int) -> "SplitMix64":
        return SplitMix64(stream_seed(self.seed, k))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter


def stream_seed(base_seed: int, k: int) -> int:
    return _kernels.stream_seed_int(int(base_seed), int(k))


@dataclass(frozen=True)
class SampledSentence:
    terminals: tuple[int, ...]  # terminal indices (level-D symbols)
    metadata: tuple[int, ...]
    seed: int
    # level-by-level symbol sequences x_0 .. x_D plus, for levels < D, the
    # number of children of each symbol; None when not retained
    derivation: tuple[tuple[tuple[str, ...], tuple[int, ...]], ...] | None = None

    def __len__(self) -> int:
        return len(self.terminals)

    def names(self, g: HierarchicalGrammar | ConcreteGrammar) -> list[str]:
        return [g.terminals[t] for t in self.terminals]


def sample_metadata(g: HierarchicalGrammar, rng: SplitMix64) -> tuple[int, ...]:
    """One uniform rule-set index per level."""
    return tuple(rng.below(c) for c in g.n_choices)


def sample_sentence(
    cg: ConcreteGrammar, rng: SplitMix64, keep_derivation: bool = False, metadata: Sequence[int] | None = None
) -> SampledSentence:
    """Expand the root level by level, left to right, picking rules uniformly per lhs."""
    seed = rng.seed
    x = [cg.root]
    levels = []
    for _ in range(cg.depth):
        nxt: list[str] = []
        widths = []
        for s in x:
            rules = cg.rules_for(s)
            r = rules[rng.below(len(rules))]
            nxt.extend(r.rhs)
            widths.append(len(r.rhs))
        levels.append((tuple(x), tuple(widths)))
        x = nxt
    levels.append((tuple(x), ()))
    ti = cg.terminal_index
    meta = tuple(metadata) if metadata is not None else (cg.metadata or ())
    return SampledSentence(
        terminals=tuple(ti[s] for s in x),
        metadata=meta,
        seed=seed,
        derivation=tuple(levels) if keep_derivation else None,
    )


@dataclass
class SentenceBatch:
    """Columnar batch: ``tokens[offsets[k]:offsets[k+1]]`` is sentence ``k``."""

    metadata: np.ndarray  # (n, D)
    tokens: np.ndarray  # flat terminal indices
    offsets: np.ndarray  # (n + 1,)
    seeds: np.ndarray  # (n,) uint64

    def __len__(self) -> int:
        return len(self.seeds)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def sentence(self, k: int) -> tuple[int, ...]:
        return tuple(int(t) for t in self.tokens[self.offsets[k] : self.offsets[k + 1]])

    def to_sentences(self) -> list[SampledSentence]:
        meta = [tuple(int(j) for j in row) for row in self.metadata]
        return [SampledSentence(self.sentence(k), meta[k], int(self.seeds[k])) for k in range(len(self))]

    @classmethod
    def from_sentences(cls, sentences: Sequence[SampledSentence]) -> "SentenceBatch":
        lengths = np.array([len(s) for s in sentences], dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
        depth = len(sentences[0].metadata) if sentences else 0
        tokens = np.fromiter((t for s in sentences for t in s.terminals), dtype=np.int64, count=int(lengths.sum()))
        meta = np.array([s.metadata for s in sentences], dtype=np.int64).reshape(len(sentences), depth)
        seeds = np.array([s.seed for s in sentences], dtype=np.uint64)
        return cls(meta, tokens, offsets, seeds)


def _hier_tables(g: HierarchicalGrammar | ConcreteGrammar):
    """Per-(level, choice, symbol) rule ranges over one shared rule array."""
    if isinstance(g, ConcreteGrammar):
        per_level = [[rs] for rs in g.rulesets]
    else:
        per_level = [list(c) for c in g.choices]
    idx = g.symbol_index
    offs = np.zeros(g.depth + 2, dtype=np.int64)
    for i, syms in enumerate(g.levels):
        offs[i + 1] = offs[i] + len(syms)
    max_c = max(len(c) for c in per_level)
    max_w = max(len(s) for s in g.levels)
    start = np.zeros((g.depth, max_c, max_w), dtype=np.int64)
    count = np.zeros((g.depth, max_c, max_w), dtype=np.int64)
    rhs, arity = [], []
    for i, sets in enumerate(per_level):
        for j, rs in enumerate(sets):
            for k, s in enumerate(g.levels[i]):
                rules = rs.rules_for(s)
                start[i, j, k] = len(rhs)
                count[i, j, k] = len(rules)
                for r in rules:
                    ids = [idx[x] for x in r.rhs]
                    rhs.append(ids + [-1] * (3 - len(ids)))
                    arity.append(len(ids))
    n_choices = np.array([len(c) for c in per_level], dtype=np.int64)
    return n_choices, offs, start, count, np.array(rhs, dtype=np.int64), np.array(arity, dtype=np.int64)


def sample_arrays(
    g: HierarchicalGrammar | ConcreteGrammar,
    n: int,
    base_seed: int,
    metadata: Sequence[int] | None = None,
    backend: str | None = None,
) -> SentenceBatch:
    """Columnar batch sampling through the numeric kernels.

    With a HierarchicalGrammar and no ``metadata`` every item draws its own
    metadata vector. Passing ``metadata`` (or a ConcreteGrammar) fixes the
    grammar for the whole batch and no metadata draws are consumed.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    depth = g.depth
    if n == 0:
        return SentenceBatch(
            np.zeros((0, depth), np.int64), np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros(0, np.uint64)
        )
    tables = _hier_tables(g)
    if isinstance(g, ConcreteGrammar):
        if metadata is not None:
            raise GrammarError("metadata cannot be passed with a ConcreteGrammar")
        fixed = np.zeros((1, depth), dtype=np.int64)
        reported = np.array(g.metadata, dtype=np.int64) if g.metadata is not None else None
    elif metadata is not None:
        fixed = np.array([g.check_metadata(metadata)], dtype=np.int64)
        reported = fixed[0]
    else:
        fixed = np.full((1, depth), -1, dtype=np.int64)
        reported = None
    seeds = _kernels.stream_seeds_np(base_seed, n)
    backend = backend or ("numba" if use_numba() else "numpy")
    kernel = _kernels.sample_batch_nb if backend == "numba" else _kernels.sample_batch_np
    meta, out, lengths = kernel(seeds, *tables, fixed)
    if isinstance(g, ConcreteGrammar):
        meta = np.broadcast_to(reported, (n, depth)).copy() if reported is not None else np.zeros((n, 0), np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    mask = np.arange(out.shape[1])[None, :] < lengths[:, None]
    return SentenceBatch(np.asarray(meta, dtype=np.int64), out[mask].astype(np.int64), offsets, seeds)


def sample_batch(
    g: HierarchicalGrammar | ConcreteGrammar,
    n: int,
    base_seed: int,
    keep_derivation: bool = False,
    metadata: Sequence[int] | None = None,
    backend: str | None = None,
) -> list[SampledSentence]:
    """``n`` sentences; item ``k`` depends only on ``(base_seed, k)``."""
    if not keep_derivation:
        return sample_arrays(g, n, base_seed, metadata=metadata, backend=backend).to_sentences()
    out = []
    for k in range(n):
        rng = SplitMix64(stream_seed(base_seed, k))
        if isinstance(g, ConcreteGrammar):
            cg = g
        else:
            m = g.check_metadata(metadata) if metadata is not None else sample_metadata(g, rng)
            cg = instantiate(g, m)
        out.append(sample_sentence(cg, rng, keep_derivation=True))
    return out


# ---------------------------------------------------------------------------
# sidecar text format
# ---------------------------------------------------------------------------


def write_sidecar(
    path: str | Path | io.TextIOBase,
    g: HierarchicalGrammar,
    sentences: Iterable[SampledSentence],
    base_seed: int,
) -> None:
    """One ``metadata=<j_0 ... j_{D-1}> tokens=<t ...>`` line per sentence."""
    sentences = list(sentences)
    lines = [
        f"# grammar={g.digest} seed={int(base_seed)} generator={GENERATOR_VERSION} count={len(sentences)}",
    ]
    for s in sentences:
        lines.append(f"metadata={' '.join(map(str, s.metadata))} tokens={' '.join(s.names(g))}")
    text = "\n".join(lines) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_sidecar(path: str | Path, g: HierarchicalGrammar) -> tuple[dict, list[SampledSentence]]:
    header: dict = {}
    out = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            header.update(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
            continue
        if not line.startswith("metadata=") or " tokens=" not in line:
            raise ValueError(f"line {lineno}: malformed sidecar record")
        meta_s, tok_s = line[len("metadata=") :].split(" tokens=", 1)
        meta = g.check_metadata([int(x) for x in meta_s.split()])
        ti = g.terminal_index
        try:
            toks = tuple(ti[t] for t in tok_s.split())
        except KeyError as e:
            raise ValueError(f"line {lineno}: unknown terminal {e.args[0]!r}") from None
        out.append(SampledSentence(toks, meta, 0))
    if "grammar" in header and header["grammar"] != g.digest:
        raise ValueError("sidecar was generated from a different grammar")
    if "seed" in header:
        header["seed"] = int(header["seed"])
        out = [SampledSentence(s.terminals, s.metadata, stream_seed(header["seed"], k)) for k, s in enumerate(out)]
    return header, out
