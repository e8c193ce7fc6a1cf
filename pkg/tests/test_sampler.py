import collections
import io

import numpy as np
import pytest

from metacfg.grammar import instantiate, mixture, parse_grammar, random_grammar
from metacfg.oracle import enumerate_language
from metacfg.sampler import (
    SplitMix64,
    read_sidecar,
    sample_arrays,
    sample_batch,
    sample_metadata,
    sample_sentence,
    stream_seed,
    write_sidecar,
)
from metacfg.verifier import accepts_many

FIG21_SUPPORT = {"0001", "00101", "11101", "111101"}


def as_str(s, g):
    return "".join(s.names(g))


def test_splitmix_reference_values():
    # published SplitMix64 outputs for seed 0 (first three draws)
    rng = SplitMix64(0)
    assert [rng.next64() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_metadata_uniform_per_level():
    g = random_grammar(5, (2, 2, 2, 2, 2), seed=1)
    draws = np.array([sample_metadata(g, SplitMix64(stream_seed(11, k))) for k in range(10_000)])
    means = draws.mean(axis=0)
    assert np.all((means >= 0.47) & (means <= 0.53)), means


def test_metadata_single_choice_is_zero():
    g = parse_grammar(
        "depth: 2\nlevel 0: S\nlevel 1: A\nlevel 2: a b\n"
        "rules level=0 choice=0:\n S -> A A\nrules level=1 choice=0:\n A -> a b\n"
    )
    for k in range(20):
        assert sample_metadata(g, SplitMix64(k)) == (0, 0)


def test_metadata_replay(fig21):
    assert sample_metadata(fig21, SplitMix64(99)) == sample_metadata(fig21, SplitMix64(99))


def test_sentences_in_fig21_support(fig21):
    cg = instantiate(fig21, (0, 1))
    rng = SplitMix64(5)
    for _ in range(500):
        assert as_str(sample_sentence(cg, rng), fig21) in FIG21_SUPPORT


def test_deterministic_grammar():
    g = parse_grammar("depth: 1\nlevel 0: S\nlevel 1: a b\nrules level=0 choice=0:\n S -> a b\n")
    cg = instantiate(g, (0,))
    for k in range(10):
        assert sample_sentence(cg, SplitMix64(k)).names(g) == ["a", "b"]


def test_frequencies_match_exact_probabilities(fig21):
    cg = instantiate(fig21, (0, 1))
    exact = enumerate_language(cg)
    batch = sample_arrays(fig21, 100_000, 2024, metadata=(0, 1))
    counts = collections.Counter(batch.sentence(k) for k in range(len(batch)))
    assert set(counts) == exact.support
    for s, p in exact.probs.items():
        assert abs(counts[s] / 100_000 - p) <= 0.01


def test_batch_reproducible(fig21):
    a = sample_batch(fig21, 200, 7)
    b = sample_batch(fig21, 200, 7)
    assert a == b


def test_batch_empty(fig21):
    assert sample_batch(fig21, 0, 7) == []


@pytest.mark.parametrize("seed", [1, 2])
def test_batch_metadata_histogram_uniform(fig21, seed):
    n = 4000
    batch = sample_arrays(fig21, n, seed)
    counts = collections.Counter(map(tuple, batch.metadata.tolist()))
    sigma = np.sqrt(n * 0.25 * 0.75)
    for m in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        assert abs(counts[m] - n / 4) <= 3 * sigma


def test_items_independent_of_batch(fig21):
    big = sample_batch(fig21, 50, 3)
    small = sample_batch(fig21, 20, 3)
    assert big[:20] == small
    assert big[37].seed == stream_seed(3, 37)


def test_kernel_matches_reference_path(toy_a, backend):
    fast = sample_batch(toy_a, 300, 12, backend=backend)
    slow = sample_batch(toy_a, 300, 12, keep_derivation=True)
    assert [(s.terminals, s.metadata, s.seed) for s in fast] == [(s.terminals, s.metadata, s.seed) for s in slow]


def test_derivation_frontier(toy_b):
    for s in sample_batch(toy_b, 50, 4, keep_derivation=True):
        levels = s.derivation
        assert len(levels) == toy_b.depth + 1
        assert levels[0][0] == (toy_b.root,)
        assert list(levels[-1][0]) == s.names(toy_b)
        for (syms, widths), (nxt, _) in zip(levels, levels[1:]):
            assert len(widths) == len(syms) and sum(widths) == len(nxt)


def test_lengths_within_bounds():
    g = random_grammar(3, (3, 3, 3), seed=2)
    lengths = sample_arrays(g, 5000, 1).lengths()
    assert lengths.min() >= 8 and lengths.max() <= 27


@pytest.mark.parametrize("gseed", [0, 5])
def test_round_trip_with_verifier(gseed):
    g = random_grammar(3, (3, 3, 3), seed=gseed)
    batch = sample_arrays(g, 3000, gseed)
    strings = [batch.sentence(k) for k in range(len(batch))]
    assert accepts_many(mixture(g), strings).all()
    for m in {tuple(r) for r in batch.metadata.tolist()}:
        idx = [k for k in range(len(batch)) if tuple(batch.metadata[k]) == m]
        assert accepts_many(instantiate(g, m), [strings[k] for k in idx]).all()


def test_concrete_grammar_batch(fig21):
    mx = mixture(fig21)
    batch = sample_arrays(mx, 100, 0)
    assert batch.metadata.shape == (100, 0)
    assert accepts_many(mx, [batch.sentence(k) for k in range(100)]).all()


def test_sidecar_round_trip(tmp_path, fig21):
    sents = sample_batch(fig21, 25, 8)
    p = tmp_path / "c.txt"
    write_sidecar(p, fig21, sents, 8)
    header, back = read_sidecar(p, fig21)
    assert header["grammar"] == fig21.digest
    assert header["seed"] == 8
    assert back == sents
    first = p.read_text().splitlines()[1]
    assert first.startswith("metadata=") and " tokens=" in first


def test_sidecar_rejects_other_grammar(tmp_path, fig21, toy_a):
    buf = io.StringIO()
    write_sidecar(buf, fig21, sample_batch(fig21, 3, 1), 1)
    p = tmp_path / "c.txt"
    p.write_text(buf.getvalue())
    with pytest.raises(ValueError):
        read_sidecar(p, toy_a)
