"""Linear probes that read metadata out of frozen hidden states.

Feature for (layer l, position i): mean of the layer-l residual stream over
terminal positions i .. i+4 of an ALL_MASK input, so the probe sees a
prompt of i + 5 terminals. One logistic-regression classifier per metadata
level; the reported accuracy is the rate at which the classifiers for levels
0 .. d-1 are all right.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import build_inference_corpus
from .model import Checkpoint, Transformer
from .sampler import SampledSentence, SentenceBatch

__all__ = [
    "WINDOW",
    "ProbeSet",
    "ProbeResult",
    "LogisticProbe",
    "build_probe_dataset",
    "build_probe_features",
    "split_indices",
    "train_probe",
    "probing_accuracy",
    "write_probe_csv",
    "write_hidden_dump",
    "read_hidden_dump",
]

WINDOW = 5


@dataclass
class ProbeSet:
    """Features for one (layer, position); rows align with ``labels``."""

    layer: int
    position: int
    features: np.ndarray  # (n, hidden)
    labels: np.ndarray  # (n, D) metadata
    skipped: int = 0  # sentences too short for the window


@torch.no_grad()
def build_probe_features(
    m: Checkpoint | Transformer,
    sentences: Sequence[SampledSentence] | SentenceBatch,
    layers: Sequence[int],
    positions: Sequence[int],
    batch_size: int = 256,
) -> dict[tuple[int, int], ProbeSet]:
    """One forward pass per batch covering every requested (layer, position)."""
    model = m.model() if isinstance(m, Checkpoint) else m
    model.eval()
    vocab = m.vocab if isinstance(m, Checkpoint) else None
    if vocab is None:
        raise TypeError("build_probe_features needs a Checkpoint (for its vocabulary)")
    for l in layers:
        if not 0 <= l <= model.cfg.n_layers:
            raise ValueError(f"layer {l} outside [0, {model.cfg.n_layers}]")
    corpus = build_inference_corpus(sentences, vocab)
    term_len = corpus.lengths() - vocab.depth - 2
    pre = 1 + vocab.depth
    feats: dict[tuple[int, int], list[np.ndarray]] = {(l, i): [] for l in layers for i in positions}
    order = np.argsort(corpus.lengths(), kind="stable")
    chunks = []
    for a in range(0, len(order), batch_size):
        idx = order[a : a + batch_size]
        toks, _ = corpus.padded(idx)
        _, hidden = model(torch.from_numpy(toks), return_hidden=True)
        for i in positions:
            ok = term_len[idx] >= i + WINDOW
            for l in layers:
                h = hidden[l][torch.from_numpy(ok)][:, pre + i : pre + i + WINDOW]
                feats[(l, i)].append(h.mean(dim=1).to(torch.float64).numpy())
        chunks.append(idx)
    order_all = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
    out = {}
    for i in positions:
        ok_sorted = term_len[order_all] >= i + WINDOW
        kept = order_all[ok_sorted]
        # restore the original sentence order
        back = np.argsort(kept, kind="stable")
        for l in layers:
            f = np.concatenate(feats[(l, i)]) if feats[(l, i)] else np.zeros((0, model.cfg.d_model))
            out[(l, i)] = ProbeSet(l, i, f[back], corpus.metadata[kept[back]], int((~ok_sorted).sum()))
    return out


def build_probe_dataset(
    m: Checkpoint | Transformer, sentences: Sequence[SampledSentence] | SentenceBatch, layer: int, position: int
) -> ProbeSet:
    ps = build_probe_features(m, sentences, [layer], [position])[(layer, position)]
    if len(ps.features) == 0:
        raise ValueError(f"no sentence is long enough for position {position} (window {WINDOW})")
    return ps


def split_indices(n: int, seed: int = 0, fractions=(0.7, 0.15, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic train / validation / test split (7,000 / 1,500 / 1,500 of 10,000)."""
    perm = np.random.Generator(np.random.Philox(key=seed)).permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return perm[:a], perm[a:b], perm[b:]


@dataclass
class LogisticProbe:
    mean: np.ndarray
    scale: np.ndarray
    weight: np.ndarray
    bias: float
    epochs: int
    val_accuracy: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)


def train_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    level: int | None = None,
    lr: float = 0.5,
    max_epochs: int = 2000,
    patience: int = 50,
) -> LogisticProbe:
    """Full-batch gradient descent on the mean logistic loss, zero init,
    standardized inputs; keeps the weights with the best validation accuracy."""
    y = np.asarray(y_train)
    if set(np.unique(y)) - {0, 1}:
        raise ValueError(f"level {level}: probe labels must be binary, got {sorted(set(np.unique(y)))}")
    if len(np.unique(y)) < 2:
        raise ValueError(f"level {level}: training split holds a single class")
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x_train - mean) / scale
    xv = (x_val - mean) / scale
    yf = y.astype(np.float64)
    w = np.zeros(xs.shape[1])
    b = 0.0
    best = (-1.0, w.copy(), b, 0)
    stale = 0
    for epoch in range(1, max_epochs + 1):
        z = xs @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = p - yf
        w -= lr * (xs.T @ g) / len(yf)
        b -= lr * g.mean()
        acc = float((((xv @ w + b) > 0).astype(np.int64) == y_val).mean()) if len(y_val) else 0.0
        if acc > best[0]:
            best = (acc, w.copy(), b, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return LogisticProbe(mean, scale, best[1], float(best[2]), best[3], best[0])


@dataclass
class ProbeResult:
    layer: int
    position: int
    depth: int
    per_level_accuracy: list[float]
    all_correct_accuracy: float
    chance_rate: float
    n_test: int
    stderr: float
    settings: dict = field(default_factory=dict)

    @property
    def prompt_length(self) -> int:
        return self.position + WINDOW


def probing_accuracy(
    m: Checkpoint | Transformer,
    sentences: Sequence[SampledSentence] | SentenceBatch,
    layers: Sequence[int],
    positions: Sequence[int],
    depths: Sequence[int],
    seed: int = 0,
    n_choices: Sequence[int] | None = None,
) -> list[ProbeResult]:
    """All-levels-correct probing accuracy for every (layer, position, depth).

    Classifiers for a given (layer, position, level) are trained once and
    shared by every depth, so all depths are scored on the same test items.
    """
    if isinstance(m, Checkpoint):
        n_choices = m.vocab.n_choices
    if n_choices is None:
        raise ValueError("n_choices is required when probing a bare model")
    max_d = max(depths)
    if max_d > len(n_choices) or min(depths) < 1:
        raise ValueError(f"depths must lie in [1, {len(n_choices)}]")
    sets = build_probe_features(m, sentences, layers, positions)
    results = []
    for l in layers:
        for i in positions:
            ps = sets[(l, i)]
            if len(ps.features) < 3:
                raise ValueError(f"no usable sentences at position {i}")
            tr, va, te = split_indices(len(ps.features), seed)
            correct = []
            for lev in range(max_d):
                clf = train_probe(
                    ps.features[tr], ps.labels[tr, lev], ps.features[va], ps.labels[va, lev], level=lev
                )
                correct.append(clf.predict(ps.features[te]) == ps.labels[te, lev])
            correct_arr = np.array(correct)
            for d in depths:
                all_ok = correct_arr[:d].all(axis=0)
                p = float(all_ok.mean())
                results.append(
                    ProbeResult(
                        layer=l,
                        position=i,
                        depth=d,
                        per_level_accuracy=[float(c.mean()) for c in correct_arr[:d]],
                        all_correct_accuracy=p,
                        chance_rate=1.0 / math.prod(n_choices[:d]),
                        n_test=len(te),
                        stderr=math.sqrt(p * (1 - p) / len(te)),
                        settings={"seed": seed, "n_train": len(tr), "n_val": len(va), "skipped": ps.skipped},
                    )
                )
    return results


def write_probe_csv(path: str | Path, results: Sequence[ProbeResult]) -> None:
    max_d = max((r.depth for r in results), default=0)
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["layer", "position", "depth"]
            + [f"per_level_acc_{k}" for k in range(max_d)]
            + ["all_correct_acc", "chance_rate", "n_test", "stderr"]
        )
        for r in results:
            accs = r.per_level_accuracy + [""] * (max_d - len(r.per_level_accuracy))
            w.writerow([r.layer, r.position, r.depth, *accs, r.all_correct_accuracy, r.chance_rate, r.n_test, r.stderr])


_DUMP = struct.Struct("<4sIIII")


def write_hidden_dump(path: str | Path, ps: ProbeSet) -> None:
    """Header (magic, layer, position, count, hidden size) then float32 rows."""
    f = np.ascontiguousarray(ps.features, dtype="<f4")
    Path(path).write_bytes(_DUMP.pack(b"MCHS", ps.layer, ps.position, f.shape[0], f.shape[1]) + f.tobytes())


def read_hidden_dump(path: str | Path) -> tuple[int, int, np.ndarray]:
    data = Path(path).read_bytes()
    magic, layer, position, count, hidden = _DUMP.unpack_from(data, 0)
    if magic != b"MCHS":
        raise ValueError("not a hidden-state dump")
    arr = np.frombuffer(data, dtype="<f4", offset=_DUMP.size, count=count * hidden).reshape(count, hidden)
    return layer, position, arr.copy()
