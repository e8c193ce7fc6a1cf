"""Hot loops: batched ancestral sampling and level-stratified CYK.

Each kernel has a numba version (``*_nb``) and a vectorized numpy version
(``*_np``) that return identical results. :mod:`metacfg._accel` decides which
one the public API calls.

Random numbers come from SplitMix64 used in counter mode: draw ``k`` of a
stream with seed ``s`` is ``mix64(s + (k + 1) * GOLDEN)``. A uniform index in
``[0, n)`` is ``((z >> 11) * n) >> 53``.
"""

import numpy as np

from ._accel import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a Python int (reference path)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_seed_int(base: int, k: int) -> int:
    """Seed of item ``k`` in a batch drawn with ``base``."""
    return mix64_int((mix64_int(base) + (k + 1) * 0x9E3779B97F4A7C15) & MASK64)


def mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def stream_seeds_np(base: int, n: int) -> np.ndarray:
    b = np.uint64(mix64_int(base))
    k = np.arange(1, n + 1, dtype=np.uint64)
    return mix64_np(b + k * GOLDEN)


@njit
def _mix64_nb(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit
def _pick_nb(seed, counter, n):
    z = _mix64_nb(seed + np.uint64(counter + 1) * np.uint64(0x9E3779B97F4A7C15))
    return np.int64(((z >> np.uint64(11)) * np.uint64(n)) >> np.uint64(53))


def _pick_np(seed: np.ndarray, counter: np.ndarray, n: np.ndarray) -> np.ndarray:
    z = mix64_np(seed + (counter.astype(np.uint64) + np.uint64(1)) * GOLDEN)
    return (((z >> np.uint64(11)) * n.astype(np.uint64)) >> np.uint64(53)).astype(np.int64)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
#
# Hierarchical tables: for level i, choice j and local symbol index s,
# rules are rule_rhs[rs_start[i, j, s] : rs_start[i, j, s] + rs_count[i, j, s]].
# A sentence consumes D draws for its metadata, then one draw per expanded
# symbol, level by level, left to right.


@njit
def sample_batch_nb(seeds, n_choices, level_offset, rs_start, rs_count, rule_rhs, rule_arity, fixed_meta):
    n = seeds.shape[0]
    depth = n_choices.shape[0]
    max_len = 1
    for _ in range(depth):
        max_len *= 3
    meta = np.empty((n, depth), dtype=np.int64)
    out = np.empty((n, max_len), dtype=np.int64)
    lengths = np.empty(n, dtype=np.int64)
    cur = np.empty(max_len, dtype=np.int64)
    nxt = np.empty(max_len, dtype=np.int64)
    for k in range(n):
        s = seeds[k]
        counter = 0
        for i in range(depth):
            if fixed_meta[0, 0] >= 0:
                meta[k, i] = fixed_meta[k if fixed_meta.shape[0] > 1 else 0, i]
            else:
                meta[k, i] = _pick_nb(s, counter, n_choices[i])
                counter += 1
        cur[0] = level_offset[0]
        width = 1
        for i in range(depth):
            j = meta[k, i]
            w = 0
            for p in range(width):
                local = cur[p] - level_offset[i]
                c = rs_count[i, j, local]
                r = rs_start[i, j, local] + _pick_nb(s, counter, c)
                counter += 1
                for q in range(rule_arity[r]):
                    nxt[w] = rule_rhs[r, q]
                    w += 1
            for p in range(w):
                cur[p] = nxt[p]
            width = w
        lengths[k] = width
        for p in range(width):
            out[k, p] = cur[p] - level_offset[depth]
    return meta, out, lengths


def sample_batch_np(seeds, n_choices, level_offset, rs_start, rs_count, rule_rhs, rule_arity, fixed_meta):
    n = seeds.shape[0]
    depth = n_choices.shape[0]
    counter = np.zeros(n, dtype=np.int64)
    if fixed_meta[0, 0] >= 0:
        meta = np.broadcast_to(fixed_meta, (n, depth)).astype(np.int64)
    else:
        meta = np.empty((n, depth), dtype=np.int64)
        for i in range(depth):
            meta[:, i] = _pick_np(seeds, counter, np.full(n, n_choices[i]))
            counter += 1
    owner = np.arange(n, dtype=np.int64)
    sym = np.full(n, level_offset[0], dtype=np.int64)
    for i in range(depth):
        # owner stays sorted, so the rank of a symbol inside its sentence is
        # its flat index minus the first flat index of that sentence
        counts = np.bincount(owner, minlength=n)
        first = np.concatenate(([0], np.cumsum(counts)[:-1]))
        rank = np.arange(owner.size) - first[owner]
        local = sym - level_offset[i]
        j = meta[owner, i]
        c = rs_count[i, j, local]
        r = rs_start[i, j, local] + _pick_np(seeds[owner], counter[owner] + rank, c)
        counter += counts
        ar = rule_arity[r]
        total = int(ar.sum())
        starts = np.concatenate(([0], np.cumsum(ar)[:-1]))
        within = np.arange(total) - np.repeat(starts, ar)
        sym = rule_rhs[np.repeat(r, ar), within]
        owner = np.repeat(owner, ar)
    lengths = np.bincount(owner, minlength=n)
    max_len = 3**depth
    out = np.full((n, max_len), -1, dtype=np.int64)
    first = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    out[owner, np.arange(owner.size) - first[owner]] = sym - level_offset[depth]
    return meta, out, lengths


# ---------------------------------------------------------------------------
# CYK
# ---------------------------------------------------------------------------
#
# Tables are the flat GrammarTables of one concrete grammar. Strings arrive as
# terminal indices packed in ``flat`` with ``offsets`` (n + 1,).


@njit
def _cyk_one_nb(tokens, level_offset, rule_start, rule_count, rule_rhs, rule_arity):
    n = tokens.shape[0]
    depth = level_offset.shape[0] - 2
    lo = 1
    hi = 1
    for _ in range(depth):
        lo *= 2
        hi *= 3
    if n < lo or n > hi:
        return False
    n_term = level_offset[depth + 1] - level_offset[depth]
    below = np.zeros((n + 1, n + 1, n_term), dtype=np.bool_)
    for a in range(n):
        t = tokens[a]
        if t < 0 or t >= n_term:
            return False
        below[a, a + 1, t] = True
    tmp = np.zeros((n + 1, n + 1), dtype=np.bool_)
    # spans of a level-i symbol have length in [2^(D-i), 3^(D-i)]
    min_child = 1
    max_child = 1
    for i in range(depth - 1, -1, -1):
        off_b = level_offset[i + 1]
        n_sym = level_offset[i + 1] - level_offset[i]
        cur = np.zeros((n + 1, n + 1, n_sym), dtype=np.bool_)
        for s_local in range(n_sym):
            s = level_offset[i] + s_local
            for r in range(rule_start[s], rule_start[s] + rule_count[s]):
                u = rule_rhs[r, 0] - off_b
                v = rule_rhs[r, 1] - off_b
                if rule_arity[r] == 2:
                    for a in range(n):
                        for c in range(a + min_child, min(a + max_child, n) + 1):
                            if not below[a, c, u]:
                                continue
                            for b in range(c + min_child, min(c + max_child, n) + 1):
                                if below[c, b, v]:
                                    cur[a, b, s_local] = True
                else:
                    w = rule_rhs[r, 2] - off_b
                    tmp[:, :] = False
                    for a in range(n):
                        for c in range(a + min_child, min(a + max_child, n) + 1):
                            if not below[a, c, u]:
                                continue
                            for b in range(c + min_child, min(c + max_child, n) + 1):
                                if below[c, b, v]:
                                    tmp[a, b] = True
                    for a in range(n):
                        for c in range(a + 2 * min_child, min(a + 2 * max_child, n) + 1):
                            if not tmp[a, c]:
                                continue
                            for b in range(c + min_child, min(c + max_child, n) + 1):
                                if below[c, b, w]:
                                    cur[a, b, s_local] = True
        below = cur
        min_child *= 2
        max_child *= 3
    return below[0, n, 0]


@njit
def cyk_batch_nb(flat, offsets, level_offset, rule_start, rule_count, rule_rhs, rule_arity):
    m = offsets.shape[0] - 1
    out = np.zeros(m, dtype=np.bool_)
    for k in range(m):
        out[k] = _cyk_one_nb(
            flat[offsets[k] : offsets[k + 1]], level_offset, rule_start, rule_count, rule_rhs, rule_arity
        )
    return out


def _cyk_one_np(tokens, level_offset, rule_start, rule_count, rule_rhs, rule_arity):
    n = tokens.shape[0]
    depth = level_offset.shape[0] - 2
    if n < 2**depth or n > 3**depth:
        return False
    n_term = int(level_offset[depth + 1] - level_offset[depth])
    if tokens.min() < 0 or tokens.max() >= n_term:
        return False
    below = np.zeros((n_term, n + 1, n + 1), dtype=np.float32)
    below[tokens, np.arange(n), np.arange(1, n + 1)] = 1.0
    for i in range(depth - 1, -1, -1):
        off_b = level_offset[i + 1]
        n_sym = int(level_offset[i + 1] - level_offset[i])
        cur = np.zeros((n_sym, n + 1, n + 1), dtype=np.float32)
        for s_local in range(n_sym):
            s = level_offset[i] + s_local
            for r in range(rule_start[s], rule_start[s] + rule_count[s]):
                u, v, w = rule_rhs[r] - off_b
                # boolean matrix products; one per binary step of the rule
                prod = np.minimum(below[u] @ below[v], 1.0)
                if rule_arity[r] == 3:
                    prod = np.minimum(prod @ below[w], 1.0)
                np.maximum(cur[s_local], prod, out=cur[s_local])
        below = cur
    return bool(below[0, 0, n] > 0)


def cyk_batch_np(flat, offsets, level_offset, rule_start, rule_count, rule_rhs, rule_arity):
    m = offsets.shape[0] - 1
    out = np.zeros(m, dtype=bool)
    for k in range(m):
        out[k] = _cyk_one_np(
            flat[offsets[k] : offsets[k + 1]], level_offset, rule_start, rule_count, rule_rhs, rule_arity
        )
    return out
