"""Command line entry point: ``metacfg <command> ...``.

Commands: sample, verify, train, eval, oracle (enumerate | posterior |
next-token) and experiment. Grammars are given as a file path or a preset
name (fig21, desk3, toy_a, toy_b).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from .grammar import GrammarError, HierarchicalGrammar, instantiate, load_grammar, mixture

log = logging.getLogger("metacfg")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _grammar(args) -> HierarchicalGrammar:
    return load_grammar(args.grammar)


def _target(g: HierarchicalGrammar, args):
    """Concrete grammar picked by --metadata / --mixture (mixture by default)."""
    if getattr(args, "metadata", None):
        return instantiate(g, _ints(args.metadata))
    return mixture(g)


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ---------------------------------------------------------------------------
# sample / verify
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    from .corpus import Vocabulary, build_training_corpus, write_corpus
    from .sampler import sample_arrays, write_sidecar

    g = _grammar(args)
    meta = _ints(args.metadata) if args.metadata else None
    batch = sample_arrays(g, args.n, args.seed, metadata=meta)
    write_sidecar(args.out, g, batch.to_sentences(), args.seed)
    if args.tokenized:
        corpus = build_training_corpus(batch, args.dm, Vocabulary.for_grammar(g), args.seed)
        write_corpus(args.tokenized, corpus)
    log.info("wrote %d sentences to %s", args.n, args.out)
    return 0


def _read_strings(path: str, g: HierarchicalGrammar) -> list[list[str]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "tokens=" in line:
            line = line.split("tokens=", 1)[1]
        out.append(line.split())
    return out


def cmd_verify(args) -> int:
    from .verifier import accepts_many

    g = _grammar(args)
    cg = _target(g, args)
    strings = _read_strings(args.input, g)
    encoded, verdicts = [], []
    for s in strings:
        try:
            encoded.append(list(cg.encode(s)) if s else None)
        except GrammarError:
            encoded.append(None)  # unknown token: reported as rejected
    ok = [e for e in encoded if e is not None]
    res = iter(accepts_many(cg, ok).tolist())
    verdicts = [next(res) if e is not None else False for e in encoded]
    for s, v in zip(strings, verdicts):
        print(f"{'ACCEPT' if v else 'REJECT'}\t{' '.join(s)}")
    n = len(verdicts)
    p = sum(verdicts) / n if n else float("nan")
    se = math.sqrt(p * (1 - p) / n) if n else float("nan")
    print(f"# n={n} ga={p:.4f} stderr={se:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_DATA_KEYS = {"n_train", "n_test", "data_seed", "preset"}


def _model_config(cfg_json: dict, vocab_size: int, depth: int):
    from .model import ModelConfig

    preset = cfg_json.get("preset", "desk")
    if preset not in ("tiny", "desk", "large"):
        raise ValueError(f"unknown model preset {preset!r}; choose tiny, desk or large")
    fields = {k: v for k, v in cfg_json.items() if k not in _DATA_KEYS}
    fields.setdefault("max_seq_len", 3**depth + depth + 2)
    fields["vocab_size"] = vocab_size
    return getattr(ModelConfig, preset)(**fields)


def cmd_train(args) -> int:
    from .corpus import Vocabulary, build_inference_corpus, build_training_corpus, read_corpus
    from .experiment import write_loss_trace
    from .model import save_checkpoint, train
    from .sampler import sample_arrays, stream_seed

    g = _grammar(args)
    cfg_json = json.loads(Path(args.config).read_text()) if args.config else {}
    vocab = Vocabulary.for_grammar(g)
    data_seed = int(cfg_json.get("data_seed", 0))
    if args.corpus:
        corpus = read_corpus(args.corpus, vocab)
    else:
        n_train = int(cfg_json.get("n_train", 200_000))
        corpus = build_training_corpus(
            sample_arrays(g, n_train, stream_seed(data_seed, 0)), args.dm, vocab, stream_seed(data_seed, 4)
        )
    test = sample_arrays(g, int(cfg_json.get("n_test", 10_000)), stream_seed(data_seed, 1))
    evals = {
        "test_loss_no_meta": build_inference_corpus(test, vocab),
        "test_loss_with_meta": build_inference_corpus(test, vocab, with_metadata=True, dm=g.depth),
    }
    cfg = _model_config(cfg_json, len(vocab), g.depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, vocab, corpus, evals, max_steps=args.max_steps)
    res.checkpoint.extra.update({"grammar": g.digest, "dm": args.dm})
    save_checkpoint(out / "model.ckpt", res.checkpoint)
    write_loss_trace(out / "loss_trace.csv", res.trace)
    log.info("trained %d steps in %.1fs -> %s", res.checkpoint.step, res.seconds, out)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .corpus import build_inference_corpus
    from .eval import ModelGenerator, assemble_report, expected_calibration_error, ga_sweep, ntp_loss
    from .model import load_checkpoint
    from .probe import build_probe_features, probing_accuracy, write_hidden_dump
    from .sampler import sample_arrays, stream_seed

    suite = {s.strip() for s in args.suite.split(",") if s.strip()}
    unknown = suite - {"loss", "ga", "ece", "probe"}
    if unknown:
        raise SystemExit(f"unknown suite entries: {sorted(unknown)}")
    g = _grammar(args)
    ck = load_checkpoint(args.checkpoint)
    test = sample_arrays(g, args.n_test, stream_seed(args.seed, 1))
    plain = build_inference_corpus(test, ck.vocab)
    losses, ga, calib, probes = {}, {}, None, []
    if "loss" in suite:
        losses["no_metadata"] = ntp_loss(ck, plain, "no_metadata")
        with_meta = build_inference_corpus(test, ck.vocab, with_metadata=True, dm=g.depth)
        losses["with_metadata"] = ntp_loss(ck, with_meta, f"with_metadata(D_M={g.depth})")
    if "ga" in suite:
        gen = ModelGenerator(ck, ck.vocab, seed=stream_seed(args.seed, 5))
        ga = ga_sweep(gen, g, _ints(args.prompt_lengths), args.n_ga, stream_seed(args.seed, 2))
    if "ece" in suite:
        calib = expected_calibration_error(ck, plain, bins=args.bins)
    if "probe" in suite:
        layers, positions = _ints(args.probe_layers), _ints(args.probe_positions)
        sents = sample_arrays(g, args.n_probe, stream_seed(args.seed, 3))
        probes = probing_accuracy(ck, sents, layers, positions, range(1, g.depth + 1), seed=args.seed)
        if args.hidden_dump:
            d = Path(args.hidden_dump)
            d.mkdir(parents=True, exist_ok=True)
            for (l, i), ps in build_probe_features(ck, sents, layers, positions).items():
                write_hidden_dump(d / f"hidden_l{l}_p{i}.bin", ps)
    settings = {
        "seed": args.seed,
        "n_test": args.n_test,
        "n_ga": args.n_ga,
        "n_probe": args.n_probe,
        "bins": args.bins,
        "suite": sorted(suite),
    }
    report = assemble_report(g, ck, ck.extra.get("dm"), losses, ga, calib, probes, settings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    report.write_csvs(out.parent)
    log.info("report written to %s", out)
    return 0


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def cmd_oracle(args) -> int:
    from . import oracle as orc

    g = _grammar(args)
    names = g.terminals
    prefix: tuple[int, ...] = ()
    if args.prefix:
        toks = args.prefix.split()
        bad = [t for t in toks if t not in names]
        if bad:
            raise SystemExit(f"unknown terminal(s) in prefix: {bad}")
        prefix = tuple(names.index(t) for t in toks)
    meta = _ints(args.metadata) if args.metadata else None

    if args.action == "enumerate":
        lang = (
            orc.enumerate_language(instantiate(g, meta), args.budget)
            if meta is not None
            else orc.marginal_language(g, budget=args.budget)
        )
        items = sorted(lang.probs.items(), key=lambda kv: (-kv[1], kv[0]))
        out = {
            "grammar": g.digest,
            "metadata": list(meta) if meta is not None else None,
            "count": len(items),
            "total": lang.total(),
            "strings": [{"tokens": " ".join(names[t] for t in s), "prob": p} for s, p in items],
        }
    elif args.action == "posterior":
        post = orc.metadata_posterior(g, prefix, budget=args.budget)
        out = {
            "grammar": g.digest,
            "prefix": args.prefix or "",
            "posterior": [{"metadata": list(m), "prob": p} for m, p in sorted(post.items())],
        }
    else:
        if meta is not None:
            dist = orc.enumerate_language(instantiate(g, meta), args.budget).next_token(prefix)
        else:
            dist = orc.exact_next_token(g, prefix, budget=args.budget)
        labels = list(names) + ["[EOS]"]
        out = {
            "grammar": g.digest,
            "prefix": args.prefix or "",
            "metadata": list(meta) if meta is not None else None,
            "distribution": {lab: float(p) for lab, p in zip(labels, dist)},
        }
    _dump(out, args.out)
    return 0


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    from .experiment import DeskConfig, run_sweep

    cfg = DeskConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else DeskConfig()
    result = run_sweep(cfg, args.seeds, args.out)
    _dump(result.get("comparison", {}), None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metacfg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample sentences to a sidecar text file")
    p.add_argument("--grammar", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metadata", help="fixed metadata, e.g. 0,1,1")
    p.add_argument("--out", required=True)
    p.add_argument("--tokenized", help="also write a binary training corpus here")
    p.add_argument("--dm", type=int, default=0, help="metadata depth for --tokenized")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("verify", help="check sentences against a grammar")
    p.add_argument("--grammar", required=True)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--metadata")
    grp.add_argument("--mixture", action="store_true", help="check against the mixture grammar (default)")
    p.add_argument("--input", required=True, help="sidecar file or one space-separated sentence per line")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", help="train a model, writing model.ckpt and loss_trace.csv")
    p.add_argument("--grammar", required=True)
    p.add_argument("--dm", type=int, required=True)
    p.add_argument("--config", help="JSON with model fields plus preset / n_train / n_test / data_seed")
    p.add_argument("--corpus", help="binary corpus to train on instead of sampling one")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint into a JSON report and CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grammar", required=True)
    p.add_argument("--suite", default="loss,ga,ece,probe")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-test", type=int, default=10_000)
    p.add_argument("--n-ga", type=int, default=500)
    p.add_argument("--prompt-lengths", default="1,3,5,8,12")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--n-probe", type=int, default=10_000)
    p.add_argument("--probe-layers", default="2,4")
    p.add_argument("--probe-positions", default="0,3,6")
    p.add_argument("--hidden-dump", help="directory for per-(layer, position) hidden-state dumps")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="exact enumeration, posterior and next-token queries")
    p.add_argument("action", choices=["enumerate", "posterior", "next-token"])
    p.add_argument("--grammar", required=True)
    p.add_argument("--metadata")
    p.add_argument("--prefix", help='terminal names, e.g. "0 0 1"')
    p.add_argument("--budget", type=int, default=10**6)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("experiment", help="desk-scale D_M=0 vs D_M=D sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--config", help="JSON overriding DeskConfig fields")
    p.set_defaults(fn=cmd_experiment)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (GrammarError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
