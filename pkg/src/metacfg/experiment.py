"""Desk-scale driver: train D_M = 0 and D_M = D models over several seeds and
collect losses, GA sweeps and probing accuracy for the qualitative comparison.

Every (seed, D_M) cell is written to its own directory and reused when the
cached summary carries the same config hash, so an interrupted sweep resumes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Vocabulary, build_inference_corpus, build_training_corpus
from .eval import ModelGenerator, assemble_report, ga_sweep, ntp_loss
from .grammar import HierarchicalGrammar, load_grammar
from .model import ModelConfig, save_checkpoint, train
from .probe import probing_accuracy
from .sampler import sample_arrays, stream_seed

log = logging.getLogger(__name__)

__all__ = ["DeskConfig", "load_cells", "run_cell", "run_sweep", "summarize", "write_loss_trace"]

# stream ids under one seed, so the data sets never share sentences
_TRAIN, _TEST, _GA, _PROBE, _COIN, _GEN = range(6)


@dataclass
class DeskConfig:
    grammar: str = "desk3"
    n_train: int = 500_000
    n_test: int = 10_000
    n_ga: int = 500
    n_probe: int = 10_000
    prompt_lengths: tuple[int, ...] = (1, 3, 5, 8, 12)
    probe_layers: tuple[int, ...] = (2, 4)
    probe_positions: tuple[int, ...] = (0, 3, 6)
    model: dict = field(default_factory=lambda: {"n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 344})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        d = dict(d)
        for k in ("prompt_lengths", "probe_layers", "probe_positions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self, g: HierarchicalGrammar) -> str:
        blob = json.dumps({"cfg": self.to_dict(), "grammar": g.digest}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_loss_trace(path: Path, trace: Sequence[dict]) -> None:
    cols = ["step", "train_loss", "test_loss_no_meta", "test_loss_with_meta"]
    lines = [",".join(cols)]
    for row in trace:
        lines.append(",".join(repr(float(row.get(c, math.nan))) if c != "step" else str(row["step"]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def run_cell(cfg: DeskConfig, seed: int, dm: int, out_dir: str | Path) -> dict:
    """Train one model and evaluate it; returns (and caches) a flat summary."""
    g = load_grammar(cfg.grammar)
    out = Path(out_dir) / f"seed{seed}_dm{dm}"
    summary_path = out / "summary.json"
    key = cfg.digest(g)
    if summary_path.exists():
        cached = json.loads(summary_path.read_text())
        if cached.get("config_hash") == key:
            return cached
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.for_grammar(g)
    t0 = time.time()
    train_sents = sample_arrays(g, cfg.n_train, stream_seed(seed, _TRAIN))
    corpus = build_training_corpus(train_sents, dm, vocab, stream_seed(seed, _COIN))
    test = sample_arrays(g, cfg.n_test, stream_seed(seed, _TEST))
    eval_sets = {
        "test_loss_no_meta": build_inference_corpus(test, vocab),
        "test_loss_with_meta": build_inference_corpus(test, vocab, with_metadata=True, dm=g.depth),
    }
    max_len = 3**g.depth + g.depth + 2
    mcfg = ModelConfig(**{**cfg.model, "vocab_size": len(vocab), "max_seq_len": max_len, "seed": seed})
    res = train(mcfg, vocab, corpus, eval_sets)
    ckpt = res.checkpoint
    save_checkpoint(out / "model.ckpt", ckpt)
    write_loss_trace(out / "loss_trace.csv", res.trace)

    losses = {
        "no_metadata": ntp_loss(ckpt, eval_sets["test_loss_no_meta"], "no_metadata"),
        "with_metadata": ntp_loss(ckpt, eval_sets["test_loss_with_meta"], f"with_metadata(D_M={g.depth})"),
    }
    ga = ga_sweep(
        ModelGenerator(ckpt, vocab, seed=stream_seed(seed, _GEN)),
        g,
        cfg.prompt_lengths,
        cfg.n_ga,
        stream_seed(seed, _GA),
    )
    probes = probing_accuracy(
        ckpt,
        sample_arrays(g, cfg.n_probe, stream_seed(seed, _PROBE)),
        cfg.probe_layers,
        cfg.probe_positions,
        depths=range(1, g.depth + 1),
        seed=seed,
    )
    settings = {"seed": seed, "desk": cfg.to_dict(), "train_seconds": res.seconds}
    report = assemble_report(g, ckpt, dm, losses, ga, None, probes, settings)
    report.write(out / "report.json")
    report.write_csvs(out)

    top = max(cfg.probe_layers)
    summary = {
        "config_hash": key,
        "seed": seed,
        "dm": dm,
        "checkpoint_id": ckpt.id,
        "steps": ckpt.step,
        "seconds": time.time() - t0,
        "loss_no_meta": losses["no_metadata"].mean_loss,
        "loss_with_meta": losses["with_metadata"].mean_loss,
        "ga": {str(lp): e.accuracy for lp, e in ga.items()},
        "probe": {
            str(r.position): r.all_correct_accuracy
            for r in probes
            if r.layer == top and r.depth == g.depth
        },
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    log.info("cell seed=%d dm=%d done in %.0fs", seed, dm, summary["seconds"])
    return summary


def load_cells(out_dir: str | Path) -> list[dict]:
    """Cached per-cell summaries under ``out_dir``, in (seed, dm) order."""
    cells = [json.loads(p.read_text()) for p in Path(out_dir).glob("seed*_dm*/summary.json")]
    return sorted(cells, key=lambda c: (c["seed"], c["dm"]))


def run_sweep(cfg: DeskConfig, seeds: Sequence[int], out_dir: str | Path) -> dict:
    g = load_grammar(cfg.grammar)
    cells = [run_cell(cfg, s, dm, out_dir) for s in seeds for dm in (0, g.depth)]
    result = summarize(cells, cfg, g.depth)
    Path(out_dir, "sweep.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def _mean(xs):
    return float(np.mean(xs)), float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def summarize(cells: Sequence[dict], cfg: DeskConfig, depth: int) -> dict:
    """Seed-averaged comparison of the D_M = 0 and D_M = D models."""
    by = {0: [c for c in cells if c["dm"] == 0], depth: [c for c in cells if c["dm"] == depth]}
    short, long_ = str(min(cfg.prompt_lengths)), str(max(cfg.prompt_lengths))
    first, last = str(min(cfg.probe_positions)), str(max(cfg.probe_positions))
    out: dict = {"depth": depth, "seeds": sorted({c["seed"] for c in cells}), "cells": list(cells)}
    for dm, cs in by.items():
        tag = f"dm{dm}"
        out[tag] = {
            "loss_no_meta": _mean([c["loss_no_meta"] for c in cs]),
            "loss_with_meta": _mean([c["loss_with_meta"] for c in cs]),
            "ga": {lp: _mean([c["ga"][lp] for c in cs]) for lp in cs[0]["ga"]} if cs else {},
            "probe": {p: _mean([c["probe"][p] for c in cs]) for p in cs[0]["probe"]} if cs else {},
        }
    a, b = out["dm0"], out[f"dm{depth}"]
    if by[0] and by[depth]:
        wm = [c["loss_with_meta"] for c in by[depth]]
        nm = [c["loss_no_meta"] for c in by[depth]]
        out["comparison"] = {
            "ga_gap_short": a["ga"][short][0] - b["ga"][short][0],
            "ga_gap_long": abs(a["ga"][long_][0] - b["ga"][long_][0]),
            "no_meta_rel_diff": abs(b["loss_no_meta"][0] - a["loss_no_meta"][0]) / a["loss_no_meta"][0],
            "meta_gain": float(np.mean(nm) - np.mean(wm)),
            "meta_gain_sd": float(np.std(np.subtract(nm, wm), ddof=1)) if len(nm) > 1 else 0.0,
            # spread of the D_M = D model's two losses across seeds; the larger one is the yardstick
            "seed_sd": max(b["loss_no_meta"][1], b["loss_with_meta"][1]),
            "probe_gap_first": a["probe"][first][0] - b["probe"][first][0],
            "probe_gap_last": abs(a["probe"][last][0] - b["probe"][last][0]),
        }
    return out
