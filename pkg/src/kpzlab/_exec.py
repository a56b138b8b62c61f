"""Seed streams and a small deterministic worker pool."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed, *keys):
    """Return a Philox generator keyed by ``seed`` and integer ``keys``.

    The stream depends only on the keys, never on which worker draws it, so
    any parallel layout reproduces the serial result.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def thread_cap():
    env = os.environ.get("KPZLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def pmap(fn, items, workers=1):
    """Ordered map over ``items`` using at most ``workers`` threads."""
    items = list(items)
    n = max(1, min(int(workers), thread_cap(), len(items) or 1))
    if n == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def tree_sum(values):
    """Pairwise sum in a fixed order (independent of how values were produced)."""
    vals = list(values)
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]
