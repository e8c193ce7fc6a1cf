"""Held-out metrics: next-token loss, grammatical accuracy, calibration, and the report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import TokenizedCorpus, Vocabulary, make_prompt
from .grammar import ConcreteGrammar, HierarchicalGrammar, mixture
from .model import Checkpoint, Transformer, generate, masked_loss
from .sampler import SampledSentence, SplitMix64, sample_arrays, stream_seed
from .verifier import accepts_many

__all__ = [
    "LossReport",
    "ntp_loss",
    "PromptItem",
    "GAEntry",
    "ga_sweep",
    "ModelGenerator",
    "TruthGenerator",
    "ConstantGenerator",
    "CalibrationReport",
    "calibration_from_arrays",
    "expected_calibration_error",
    "oracle_calibration",
    "EvalReport",
    "ProvenanceError",
    "assemble_report",
    "DEFAULT_POSITIONS",
    "DEFAULT_PROMPT_LENGTHS",
]

DEFAULT_POSITIONS = (0, 5, 10, 25, 50)
DEFAULT_PROMPT_LENGTHS = (1, 5, 10, 25, 50)
SCHEMA_VERSION = 1


def _model(m: Checkpoint | Transformer) -> Transformer:
    model = m.model() if isinstance(m, Checkpoint) else m
    model.eval()
    return model


# ---------------------------------------------------------------------------
# next-token loss
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    """Nats per loss-masked token. Position p is the p-th loss target of a
    record: terminal p, or EOS when p equals the sentence length."""

    mean_loss: float
    n_tokens: int
    position_wise: dict[int, float]
    position_counts: dict[int, int]
    condition: str  # "no_metadata" or "with_metadata(D_M=k)"

    def at(self, positions: Sequence[int] = DEFAULT_POSITIONS) -> dict[int, float]:
        return {p: self.position_wise[p] for p in positions if p in self.position_wise}


@torch.no_grad()
def token_nll(m: Checkpoint | Transformer, corpus: TokenizedCorpus, batch_size: int = 256) -> list[np.ndarray]:
    """Per-record arrays of negative log-likelihoods over loss targets."""
    model = _model(m)
    out: list[np.ndarray | None] = [None] * len(corpus)
    order = np.argsort(corpus.lengths(), kind="stable")
    for a in range(0, len(order), batch_size):
        idx = order[a : a + batch_size]
        toks, mask = corpus.padded(idx)
        t = torch.from_numpy(toks)
        nll = masked_loss(model(t), t, torch.from_numpy(mask), reduction="none").numpy()
        tm = mask[:, 1:]
        for row, k in enumerate(idx):
            out[k] = nll[row][tm[row]]
    return out  # type: ignore[return-value]


def ntp_loss(m: Checkpoint | Transformer, corpus: TokenizedCorpus, condition: str | None = None) -> LossReport:
    if isinstance(m, Checkpoint) and m.vocab.digest != corpus.vocab.digest:
        raise ValueError("records use a different vocabulary than the checkpoint")
    per_record = token_nll(m, corpus)
    width = max((len(x) for x in per_record), default=0)
    sums = np.zeros(width)
    counts = np.zeros(width, dtype=np.int64)
    for x in per_record:
        sums[: len(x)] += x
        counts[: len(x)] += 1
    total = math.fsum(math.fsum(x) for x in per_record)
    n = int(counts.sum())
    if condition is None:
        kinds = set(int(k) for k in corpus.prefix_kind)
        condition = "no_metadata" if kinds <= {0} else "with_metadata"
    return LossReport(
        mean_loss=total / max(n, 1),
        n_tokens=n,
        position_wise={p: float(sums[p] / counts[p]) for p in range(width)},
        position_counts={p: int(counts[p]) for p in range(width)},
        condition=condition,
    )


# ---------------------------------------------------------------------------
# grammatical accuracy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptItem:
    prompt: tuple[int, ...]  # terminal indices
    source: SampledSentence  # the sentence the prompt was cut from
    index: int


Generator = Callable[[Sequence[PromptItem]], list[list[int] | None]]


@dataclass
class GAEntry:
    accuracy: float
    stderr: float
    n: int
    truncated: int = 0


def _prompt_pool(
    g: HierarchicalGrammar, prompt_lengths: Sequence[int], n: int, seed: int, source: str
) -> dict[int, list[PromptItem]]:
    if source == "process":
        pool = sample_arrays(g, 4 * n, seed).to_sentences()
    elif source == "mixture":
        pool = sample_arrays(mixture(g), 4 * n, seed).to_sentences()
    else:
        raise ValueError(f"unknown prompt source {source!r}")
    out = {}
    for lp in prompt_lengths:
        long_enough = [s for s in pool if len(s) >= lp][:n]
        out[lp] = [PromptItem(s.terminals[:lp], s, k) for k, s in enumerate(long_enough)]
    return out


def ga_sweep(
    generator: Generator,
    g: HierarchicalGrammar,
    prompt_lengths: Sequence[int] = DEFAULT_PROMPT_LENGTHS,
    n: int = 500,
    seed: int = 0,
    source: str = "process",
) -> dict[int, GAEntry]:
    """GA of prompt + generation against the mixture grammar, per prompt length.

    ``generator`` maps prompt items to generated terminal indices (EOS
    excluded), or None when generation hit its length limit. Lengths with
    too few long sentences report the achieved ``n``.
    """
    if n <= 0:
        return {}
    mx = mixture(g)
    pools = _prompt_pool(g, prompt_lengths, n, seed, source)
    table = {}
    for lp in prompt_lengths:
        items = pools[lp]
        if not items:
            table[lp] = GAEntry(float("nan"), float("nan"), 0)
            continue
        gens = generator(items)
        strings, truncated = [], 0
        for it, gen in zip(items, gens):
            if gen is None:
                truncated += 1
                strings.append([-1])
            else:
                strings.append(list(it.prompt) + list(gen))
        verdicts = accepts_many(mx, strings)
        p = float(verdicts.mean())
        table[lp] = GAEntry(p, math.sqrt(p * (1 - p) / len(items)), len(items), truncated)
    return table


class ModelGenerator:
    """Temperature-1 sampling from a trained model on [BOS] + D MASKs + prompt."""

    def __init__(self, m: Checkpoint | Transformer, vocab: Vocabulary, seed: int = 0, max_new_tokens: int | None = None):
        self.model = _model(m)
        self.vocab = vocab
        self.seed = seed
        self.max_new = max_new_tokens or 3**vocab.depth + 1

    def __call__(self, items: Sequence[PromptItem]) -> list[list[int] | None]:
        prompts = [make_prompt(it.prompt, len(it.prompt), self.vocab) for it in items]
        lp = len(items[0].prompt) if items else 0
        gens = generate(self.model, prompts, self.max_new, stream_seed(self.seed, lp))
        off = self.vocab.term_offset
        # non-terminal tokens map to -1 and make the string fail
        return [None if gg.truncated else [t - off if t >= off else -1 for t in gg.tokens] for gg in gens]


class TruthGenerator:
    """Continues each prompt with the rest of its source sentence, an exact
    sample of the ground-truth continuation given the prompt's grammar."""

    def __call__(self, items: Sequence[PromptItem]) -> list[list[int] | None]:
        return [list(it.source.terminals[len(it.prompt) :]) for it in items]


class ConstantGenerator:
    def __init__(self, tokens: Sequence[int]):
        self.tokens = list(tokens)

    def __call__(self, items: Sequence[PromptItem]) -> list[list[int] | None]:
        return [list(self.tokens) for _ in items]


class OracleGenerator:
    """Samples continuations from the exact Bayes predictor of a small grammar."""

    def __init__(self, g: HierarchicalGrammar, seed: int = 0, g_for_prediction: HierarchicalGrammar | None = None):
        from .oracle import Oracle

        self.oracle = Oracle(g_for_prediction or g)
        self.seed = seed

    def __call__(self, items: Sequence[PromptItem]) -> list[list[int] | None]:
        from .oracle import ImpossiblePrefix

        out: list[list[int] | None] = []
        for it in items:
            rng = SplitMix64(stream_seed(self.seed, it.index * 7919 + len(it.prompt)))
            seq = list(it.prompt)
            gen: list[int] = []
            while True:
                try:
                    p = self.oracle.next_token(seq)
                except ImpossiblePrefix:
                    gen.append(-1)
                    break
                k = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
                k = min(k, len(p) - 1)
                if k == self.oracle.eos:
                    break
                seq.append(k)
                gen.append(k)
            out.append(gen)
        return out


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    bins: int
    counts: list[int]
    accuracy: list[float]  # nan for empty bins
    confidence: list[float]
    ece: float
    n: int


def calibration_from_arrays(confidence: np.ndarray, correct: np.ndarray, bins: int = 15) -> CalibrationReport:
    """ECE with bins [k/m, (k+1)/m), the last one closed at 1."""
    if bins < 1:
        raise ValueError("bin count must be >= 1")
    conf = np.asarray(confidence, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    n = len(conf)
    which = np.minimum((conf * bins).astype(np.int64), bins - 1)
    counts = np.bincount(which, minlength=bins)
    acc_sum = np.bincount(which, weights=corr, minlength=bins)
    conf_sum = np.bincount(which, weights=conf, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = acc_sum / counts
        cmean = conf_sum / counts
    terms = [counts[k] / n * abs(acc[k] - cmean[k]) for k in range(bins) if counts[k]]
    return CalibrationReport(
        bins, counts.tolist(), acc.tolist(), cmean.tolist(), math.fsum(terms) if n else 0.0, n
    )


@torch.no_grad()
def expected_calibration_error(
    m: Checkpoint | Transformer, corpus: TokenizedCorpus, bins: int = 15, batch_size: int = 256
) -> CalibrationReport:
    """Confidence = max softmax probability per loss-masked target; argmax ties go to the lowest id."""
    model = _model(m)
    confs, corrects = [], []
    order = np.argsort(corpus.lengths(), kind="stable")
    for a in range(0, len(order), batch_size):
        toks, mask = corpus.padded(order[a : a + batch_size])
        probs = torch.softmax(model(torch.from_numpy(toks))[:, :-1].to(torch.float64), -1).numpy()
        tm = mask[:, 1:]
        p = probs[tm]
        confs.append(p.max(axis=1))
        corrects.append(p.argmax(axis=1) == toks[:, 1:][tm])
    return calibration_from_arrays(np.concatenate(confs), np.concatenate(corrects), bins)


def oracle_calibration(g: HierarchicalGrammar, n_tokens: int, seed: int = 0, bins: int = 15) -> CalibrationReport:
    """ECE of the exact Bayes predictor on sampled sentences (terminals + EOS),
    stopping once ``n_tokens`` targets are collected."""
    from .oracle import Oracle

    o = Oracle(g)
    confs, corrects = [], []
    k = 0
    while len(confs) < n_tokens:
        batch = sample_arrays(g, 1000, stream_seed(seed, k))
        k += 1
        for j in range(len(batch)):
            s = batch.sentence(j)
            dist = o.sequence_distributions(s)
            for pos, t in enumerate(list(s) + [o.eos]):
                confs.append(dist[pos].max())
                corrects.append(int(dist[pos].argmax()) == t)
    return calibration_from_arrays(np.array(confs[:n_tokens]), np.array(corrects[:n_tokens]), bins)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


class ProvenanceError(ValueError):
    pass


@dataclass
class EvalReport:
    grammar_hash: str
    checkpoint_id: str
    vocab_hash: str
    dm: int | None
    losses: dict[str, LossReport] = field(default_factory=dict)
    ga: dict[int, GAEntry] = field(default_factory=dict)
    calibration: CalibrationReport | None = None
    probes: list = field(default_factory=list)  # ProbeResult
    settings: dict = field(default_factory=dict)  # seeds and data sizes
    schema_version: int = SCHEMA_VERSION
    units: str = "nats per loss-masked token"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ga"] = {str(k): v for k, v in d["ga"].items()}
        for lr in d["losses"].values():
            lr["position_wise"] = {str(k): v for k, v in lr["position_wise"].items()}
            lr["position_counts"] = {str(k): v for k, v in lr["position_counts"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        from .probe import ProbeResult

        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')!r}")
        losses = {}
        for k, v in d["losses"].items():
            v = dict(v)
            v["position_wise"] = {int(p): x for p, x in v["position_wise"].items()}
            v["position_counts"] = {int(p): x for p, x in v["position_counts"].items()}
            losses[k] = LossReport(**v)
        return cls(
            grammar_hash=d["grammar_hash"],
            checkpoint_id=d["checkpoint_id"],
            vocab_hash=d["vocab_hash"],
            dm=d["dm"],
            losses=losses,
            ga={int(k): GAEntry(**v) for k, v in d["ga"].items()},
            calibration=CalibrationReport(**d["calibration"]) if d["calibration"] else None,
            probes=[ProbeResult(**p) for p in d["probes"]],
            settings=d["settings"],
            schema_version=d["schema_version"],
            units=d["units"],
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def write_csvs(self, out_dir: str | Path) -> list[Path]:
        """Flat CSV per metric next to the JSON report."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if self.losses:
            p = out_dir / "loss_positions.csv"
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["condition", "position", "mean_loss", "count"])
                for name, lr in self.losses.items():
                    for pos, v in lr.position_wise.items():
                        w.writerow([name, pos, v, lr.position_counts[pos]])
            written.append(p)
        if self.ga:
            p = out_dir / "ga.csv"
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["prompt_length", "accuracy", "stderr", "n", "truncated"])
                for lp, e in sorted(self.ga.items()):
                    w.writerow([lp, e.accuracy, e.stderr, e.n, e.truncated])
            written.append(p)
        if self.calibration:
            p = out_dir / "calibration.csv"
            c = self.calibration
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["bin", "count", "accuracy", "confidence"])
                for k in range(c.bins):
                    w.writerow([k, c.counts[k], c.accuracy[k], c.confidence[k]])
            written.append(p)
        if self.probes:
            from .probe import write_probe_csv

            p = out_dir / "probe.csv"
            write_probe_csv(p, self.probes)
            written.append(p)
        return written


def assemble_report(
    grammar: HierarchicalGrammar,
    checkpoint: Checkpoint,
    dm: int | None = None,
    losses: dict[str, LossReport] | None = None,
    ga: dict[int, GAEntry] | None = None,
    calibration: CalibrationReport | None = None,
    probes: Sequence | None = None,
    settings: dict | None = None,
    provenance: Sequence[tuple[str, str]] = (),
) -> EvalReport:
    """Bundle sub-reports. ``provenance`` lists the (checkpoint id, vocab hash)
    each part was computed with; any mismatch raises ProvenanceError."""
    for ck, vh in provenance:
        if ck != checkpoint.id:
            raise ProvenanceError(f"part computed with checkpoint {ck}, report is for {checkpoint.id}")
        if vh != checkpoint.vocab.digest:
            raise ProvenanceError("part computed with a different vocabulary")
    if checkpoint.vocab.n_choices != grammar.n_choices or checkpoint.vocab.terminal_names != grammar.terminals:
        raise ProvenanceError("checkpoint vocabulary does not belong to this grammar")
    return EvalReport(
        grammar_hash=grammar.digest,
        checkpoint_id=checkpoint.id,
        vocab_hash=checkpoint.vocab.digest,
        dm=dm,
        losses=dict(losses or {}),
        ga=dict(ga or {}),
        calibration=calibration,
        probes=list(probes or []),
        settings=dict(settings or {}),
    )
