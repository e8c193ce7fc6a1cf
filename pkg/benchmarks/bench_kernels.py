"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 100000] [--repeat 3]

Both backends run in this process (the ``backend`` argument bypasses the
environment flag), after one warm-up call so numba compile time is excluded.
"""

import argparse
import time

import numpy as np

from metacfg._accel import HAVE_NUMBA
from metacfg.grammar import load_preset, mixture
from metacfg.sampler import sample_arrays
from metacfg.verifier import accepts_many


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grammar", default="desk3")
    ap.add_argument("--n", type=int, default=100_000, help="sentences to sample")
    ap.add_argument("--n-parse", type=int, default=10_000, help="strings to parse")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is unavailable (or METACFG_DISABLE_NUMBA is set); nothing to compare")

    g = load_preset(args.grammar)
    mx = mixture(g)
    batch = sample_arrays(g, args.n_parse, 1)
    rng = np.random.default_rng(0)
    strings = [list(batch.sentence(k)) for k in range(args.n_parse)]
    # corrupt every other string so both verdicts are exercised
    for s in strings[::2]:
        s[rng.integers(len(s))] = int(rng.integers(len(g.terminals)))

    jobs = {
        f"sample {args.n}": lambda b: sample_arrays(g, args.n, 7, backend=b),
        f"cyk {args.n_parse}": lambda b: accepts_many(mx, strings, backend=b),
    }
    print(f"{'kernel':<16}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, job in jobs.items():
        job("numba")  # compile
        t_nb = best_of(lambda: job("numba"), args.repeat)
        t_np = best_of(lambda: job("numpy"), args.repeat)
        print(f"{name:<16}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
