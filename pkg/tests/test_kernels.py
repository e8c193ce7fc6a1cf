import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from metacfg import _kernels
from metacfg._accel import HAVE_NUMBA
from metacfg.grammar import instantiate, mixture, random_grammar
from metacfg.sampler import SplitMix64, sample_arrays, stream_seed
from metacfg.verifier import accepts_many

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable or disabled")


def test_mix64_paths_agree():
    zs = np.random.default_rng(0).integers(0, 2**63, size=200, dtype=np.uint64)
    want = [_kernels.mix64_int(int(z)) for z in zs]
    assert [int(x) for x in _kernels.mix64_np(zs)] == want
    assert [int(_kernels._mix64_nb(z)) for z in zs] == want


def test_stream_seeds_match_scalar():
    assert [int(x) for x in _kernels.stream_seeds_np(123, 50)] == [stream_seed(123, k) for k in range(50)]


def test_pick_paths_agree():
    rng = np.random.default_rng(1)
    seeds = _kernels.stream_seeds_np(5, 500)
    counters = rng.integers(0, 100, 500)
    ns = rng.integers(1, 7, 500)
    np_picks = _kernels._pick_np(seeds, counters, ns)
    nb_picks = [_kernels._pick_nb(s, int(c), int(n)) for s, c, n in zip(seeds, counters, ns)]
    assert list(np_picks) == [int(x) for x in nb_picks]
    assert ((np_picks >= 0) & (np_picks < ns)).all()


def test_pick_matches_splitmix_object():
    rng = SplitMix64(77)
    draws = [rng.below(5) for _ in range(20)]
    picks = [int(_kernels._pick_np(np.array([77], np.uint64), np.array([k]), np.array([5]))[0]) for k in range(20)]
    assert draws == picks


G = random_grammar(3, (3, 3, 3), seed=6)


@needs_numba
@pytest.mark.parametrize("metadata", [None, (1, 0, 1)])
def test_sampler_backends_identical(metadata):
    a = sample_arrays(G, 3000, 4, metadata=metadata, backend="numba")
    b = sample_arrays(G, 3000, 4, metadata=metadata, backend="numpy")
    for name in ("metadata", "tokens", "offsets", "seeds"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


@needs_numba
def test_cyk_backends_identical():
    batch = sample_arrays(G, 500, 2)
    rng = np.random.default_rng(3)
    strings = [list(batch.sentence(k)) for k in range(500)]
    strings += [list(rng.integers(0, 3, rng.integers(8, 28))) for _ in range(500)]
    for cg in (mixture(G), instantiate(G, (0, 1, 1))):
        a = accepts_many(cg, strings, backend="numba")
        b = accepts_many(cg, strings, backend="numpy")
        assert np.array_equal(a, b)
    assert accepts_many(mixture(G), strings[:500]).all()


def test_cyk_rejects_out_of_range_tokens():
    cg = mixture(G)
    t = cg.tables
    args = (t.level_offset, t.rule_start, t.rule_count, t.rule_rhs, t.rule_arity)
    flat = np.array([0, 1, 2, 5, 1, 1, 1, 1, -1, 0, 0, 0, 0, 0, 0, 0], dtype=np.int64)
    offsets = np.array([0, 8, 16], dtype=np.int64)
    assert not _kernels.cyk_batch_np(flat, offsets, *args).any()
    assert not np.asarray(_kernels.cyk_batch_nb(flat, offsets, *args)).any()


_SNIPPET = """
import hashlib, numpy as np
from metacfg._accel import HAVE_NUMBA
from metacfg.grammar import mixture, random_grammar
from metacfg.sampler import sample_arrays
from metacfg.verifier import accepts_many
g = random_grammar(3, (3, 3, 3), seed=6)
b = sample_arrays(g, 2000, 9)
rng = np.random.default_rng(0)
s = [list(b.sentence(k)) for k in range(200)] + [list(rng.integers(0, 3, 12)) for _ in range(200)]
v = accepts_many(mixture(g), s)
h = hashlib.sha256(b.tokens.tobytes() + b.metadata.tobytes() + v.tobytes()).hexdigest()
print(HAVE_NUMBA, h)
"""


def _run(flag):
    env = dict(os.environ)
    env.pop("METACFG_DISABLE_NUMBA", None)
    if flag:
        env["METACFG_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", _SNIPPET], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_env_flag_selects_numpy_and_results_agree():
    have, h_default = _run(None)
    off, h_off = _run("1")
    assert off == "False"
    assert h_default == h_off
    assert _run("yes")[0] == "False"
