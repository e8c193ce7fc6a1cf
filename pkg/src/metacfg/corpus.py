"""Tokenized datasets with the metadata / mask prefix.

Every sequence is laid out as::

    [BOS] p_0 ... p_{D-1} t_0 ... t_{K-1} [EOS]

where the D prefix slots carry either the first D_M metadata tokens followed
by MASKs, or D MASKs. Loss is taken on terminals and EOS only.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .grammar import HierarchicalGrammar
from .sampler import SampledSentence, SentenceBatch

__all__ = [
    "PrefixKind",
    "Vocabulary",
    "TrainingRecord",
    "TokenizedCorpus",
    "build_training_corpus",
    "build_inference_record",
    "build_inference_corpus",
    "make_prompt",
    "write_corpus",
    "read_corpus",
    "dump_corpus_text",
]

SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[MASK]")


class PrefixKind(enum.IntEnum):
    ALL_MASK = 0
    METADATA_PREFIX = 1


class Vocabulary:
    """Dense token ids: specials, then one token per (level, choice), then terminals."""

    def __init__(self, n_choices: Sequence[int], terminals: Sequence[str]):
        self.n_choices = tuple(int(c) for c in n_choices)
        self.terminal_names = tuple(terminals)
        self.tokens: list[str] = list(SPECIALS)
        self.meta_offset = []
        for i, c in enumerate(self.n_choices):
            self.meta_offset.append(len(self.tokens))
            self.tokens += [f"m{i}:{j}" for j in range(c)]
        self.term_offset = len(self.tokens)
        self.tokens += list(self.terminal_names)
        self.index = {t: k for k, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("terminal names collide with reserved token names")

    pad, bos, eos, mask = 0, 1, 2, 3

    @classmethod
    def for_grammar(cls, g: HierarchicalGrammar) -> "Vocabulary":
        return cls(g.n_choices, g.terminals)

    @property
    def depth(self) -> int:
        return len(self.n_choices)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def meta_token(self, level: int, choice: int) -> int:
        return self.meta_offset[level] + choice

    def terminal_token(self, t: int) -> int:
        return self.term_offset + t

    def is_terminal(self, tok: int) -> bool:
        return tok >= self.term_offset

    def decode_terminals(self, ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(k) - self.term_offset for k in ids if k >= self.term_offset)

    def to_dict(self) -> dict:
        return {"n_choices": list(self.n_choices), "terminals": list(self.terminal_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["n_choices"], d["terminals"])


@dataclass(frozen=True)
class TrainingRecord:
    token_ids: np.ndarray
    loss_mask: np.ndarray
    truth_metadata: tuple[int, ...]
    prefix_kind: PrefixKind

    def terminals(self, vocab: Vocabulary) -> tuple[int, ...]:
        return vocab.decode_terminals(self.token_ids)


@dataclass
class TokenizedCorpus:
    """Columnar storage of many records; record ``k`` spans ``offsets[k]:offsets[k+1]``."""

    vocab: Vocabulary
    tokens: np.ndarray  # int64 flat
    loss_mask: np.ndarray  # bool flat
    offsets: np.ndarray
    prefix_kind: np.ndarray  # uint8 (n,)
    metadata: np.ndarray  # (n, D)

    def __len__(self) -> int:
        return len(self.prefix_kind)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def record(self, k: int) -> TrainingRecord:
        a, b = self.offsets[k], self.offsets[k + 1]
        return TrainingRecord(
            self.tokens[a:b].copy(),
            self.loss_mask[a:b].copy(),
            tuple(int(j) for j in self.metadata[k]),
            PrefixKind(int(self.prefix_kind[k])),
        )

    def records(self) -> list[TrainingRecord]:
        return [self.record(k) for k in range(len(self))]

    def subset(self, idx: Sequence[int]) -> "TokenizedCorpus":
        return TokenizedCorpus.from_records(self.vocab, [self.record(int(k)) for k in idx])

    @classmethod
    def from_records(cls, vocab: Vocabulary, records: Sequence[TrainingRecord]) -> "TokenizedCorpus":
        lengths = np.array([len(r.token_ids) for r in records], dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if len(xs) else np.zeros(0, dt)  # noqa: E731
        return cls(
            vocab,
            cat([r.token_ids for r in records], np.int64),
            cat([r.loss_mask for r in records], bool),
            offsets,
            np.array([int(r.prefix_kind) for r in records], dtype=np.uint8),
            np.array([r.truth_metadata for r in records], dtype=np.int64).reshape(len(records), vocab.depth),
        )

    def padded(self, idx: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, loss_mask) of shape (n, max_len), PAD-filled and loss-masked."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        lengths = self.lengths()[idx]
        width = int(lengths.max()) if len(idx) else 0
        toks = np.full((len(idx), width), self.vocab.pad, dtype=np.int64)
        mask = np.zeros((len(idx), width), dtype=bool)
        for row, k in enumerate(idx):
            a, b = self.offsets[k], self.offsets[k + 1]
            toks[row, : b - a] = self.tokens[a:b]
            mask[row, : b - a] = self.loss_mask[a:b]
        return toks, mask


def _as_batch(sentences: Sequence[SampledSentence] | SentenceBatch) -> SentenceBatch:
    if isinstance(sentences, SentenceBatch):
        return sentences
    return SentenceBatch.from_sentences(list(sentences))


def _layout(vocab: Vocabulary, batch: SentenceBatch, kinds: np.ndarray, dm: int) -> TokenizedCorpus:
    n, depth = len(batch), vocab.depth
    lengths = batch.lengths()
    rec_len = lengths + depth + 2
    offsets = np.concatenate(([0], np.cumsum(rec_len))).astype(np.int64)
    tokens = np.empty(int(offsets[-1]), dtype=np.int64)
    mask = np.zeros(int(offsets[-1]), dtype=bool)
    starts = offsets[:-1]
    tokens[starts] = vocab.bos
    meta_tok = np.array(vocab.meta_offset, dtype=np.int64)[None, :] + batch.metadata
    for i in range(depth):
        use_meta = (kinds == PrefixKind.METADATA_PREFIX) & (i < dm)
        tokens[starts + 1 + i] = np.where(use_meta, meta_tok[:, i], vocab.mask)
    # terminals: record k, position 1 + D + p  <-  batch token offsets[k] + p
    owner = np.repeat(np.arange(n), lengths)
    pos = np.arange(len(batch.tokens)) - np.repeat(batch.offsets[:-1], lengths)
    dest = starts[owner] + 1 + depth + pos
    tokens[dest] = vocab.term_offset + batch.tokens
    mask[dest] = True
    ends = offsets[1:] - 1
    tokens[ends] = vocab.eos
    mask[ends] = True
    return TokenizedCorpus(vocab, tokens, mask, offsets, kinds.astype(np.uint8), batch.metadata.copy())


def build_training_corpus(
    sentences: Sequence[SampledSentence] | SentenceBatch, dm: int, vocab: Vocabulary, seed: int
) -> TokenizedCorpus:
    """Each record gets the depth-``dm`` metadata prefix with probability 1/2, else D MASKs.

    The coin for record ``k`` is the first draw of ``stream_seed(seed, k)``.
    With ``dm == 0`` both outcomes coincide and every record is ALL_MASK.
    """
    if not 0 <= dm <= vocab.depth:
        raise ValueError(f"metadata depth D_M={dm} outside [0, {vocab.depth}]")
    batch = _as_batch(sentences)
    n = len(batch)
    seeds = _kernels.stream_seeds_np(seed, n)
    coin = _kernels._pick_np(seeds, np.zeros(n, dtype=np.int64), np.full(n, 2))
    kinds = np.where((coin == 1) & (dm > 0), PrefixKind.METADATA_PREFIX, PrefixKind.ALL_MASK)
    return _layout(vocab, batch, kinds, dm)


def build_inference_corpus(
    sentences: Sequence[SampledSentence] | SentenceBatch, vocab: Vocabulary, with_metadata: bool = False, dm: int = 0
) -> TokenizedCorpus:
    """All records ALL_MASK, or all METADATA_PREFIX at depth ``dm``."""
    if not 0 <= dm <= vocab.depth:
        raise ValueError(f"metadata depth D_M={dm} outside [0, {vocab.depth}]")
    batch = _as_batch(sentences)
    kind = PrefixKind.METADATA_PREFIX if with_metadata and dm > 0 else PrefixKind.ALL_MASK
    return _layout(vocab, batch, np.full(len(batch), kind), dm)


def build_inference_record(
    sentence: SampledSentence, vocab: Vocabulary, with_metadata: bool = False, dm: int = 0
) -> TrainingRecord:
    return build_inference_corpus([sentence], vocab, with_metadata, dm).record(0)


def make_prompt(sentence: SampledSentence | Sequence[int], lp: int, vocab: Vocabulary) -> list[int]:
    """[BOS] + D MASKs + the first ``lp`` terminals."""
    terms = sentence.terminals if isinstance(sentence, SampledSentence) else tuple(sentence)
    if not 1 <= lp <= len(terms):
        raise ValueError(f"prompt length {lp} outside [1, {len(terms)}]")
    return [vocab.bos] + [vocab.mask] * vocab.depth + [vocab.terminal_token(t) for t in terms[:lp]]


# ---------------------------------------------------------------------------
# binary file
# ---------------------------------------------------------------------------

MAGIC = b"MCFGTOK\x00"
VERSION = 1
_HEADER = struct.Struct("<8sI32sII")  # magic, version, vocab sha256, record count, depth


def write_corpus(path: str | Path, corpus: TokenizedCorpus) -> None:
    """Little-endian: header, then per record u32 length, u32 ids, packed mask bits, u8 kind, u8 metadata[D]."""
    vocab = corpus.vocab
    parts = [_HEADER.pack(MAGIC, VERSION, bytes.fromhex(vocab.digest), len(corpus), vocab.depth)]
    for k in range(len(corpus)):
        a, b = corpus.offsets[k], corpus.offsets[k + 1]
        parts.append(struct.pack("<I", b - a))
        parts.append(corpus.tokens[a:b].astype("<u4").tobytes())
        parts.append(np.packbits(corpus.loss_mask[a:b], bitorder="little").tobytes())
        parts.append(struct.pack("<B", int(corpus.prefix_kind[k])))
        parts.append(corpus.metadata[k].astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_corpus(path: str | Path, vocab: Vocabulary) -> TokenizedCorpus:
    data = Path(path).read_bytes()
    magic, version, digest, count, depth = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError("not a tokenized corpus file")
    if version != VERSION:
        raise ValueError(f"unsupported corpus version {version}")
    if digest.hex() != vocab.digest:
        raise ValueError("corpus vocabulary hash does not match")
    if depth != vocab.depth:
        raise ValueError("corpus depth does not match vocabulary")
    pos = _HEADER.size
    records = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids = np.frombuffer(data, dtype="<u4", count=length, offset=pos).astype(np.int64)
        pos += 4 * length
        nb = (length + 7) // 8
        mask = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nb, offset=pos), bitorder="little")[:length]
        pos += nb
        kind = PrefixKind(data[pos])
        pos += 1
        meta = tuple(int(x) for x in data[pos : pos + depth])
        pos += depth
        records.append(TrainingRecord(ids, mask.astype(bool), meta, kind))
    if pos != len(data):
        raise ValueError("trailing bytes in corpus file")
    return TokenizedCorpus.from_records(vocab, records)


def dump_corpus_text(corpus: TokenizedCorpus) -> str:
    """Readable dump, one record per line; tokens outside the loss are shown as <tok>."""
    lines = []
    for k in range(len(corpus)):
        r = corpus.record(k)
        toks = [
            corpus.vocab.tokens[t] if m else f"<{corpus.vocab.tokens[t]}>" for t, m in zip(r.token_ids, r.loss_mask)
        ]
        lines.append(f"{r.prefix_kind.name} meta={' '.join(map(str, r.truth_metadata))} | {' '.join(toks)}")
    return "\n".join(lines) + "\n"
