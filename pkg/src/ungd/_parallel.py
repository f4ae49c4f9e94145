"""Ordered chunk parallelism.

Work is split into chunks whose boundaries depend only on the problem size,
and partial results are reduced in chunk order, so results do not depend on
the worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_num_threads = max(1, int(os.environ.get("UNGD_THREADS", "1") or 1))


def get_num_threads():
    return _num_threads


def set_num_threads(n):
    global _num_threads
    if int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def chunk_bounds(total, chunk):
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def map_ordered(fn, items):
    items = list(items)
    if _num_threads == 1 or len(items) < 2:
        return map(fn, items)
    with ThreadPoolExecutor(max_workers=_num_threads) as pool:
        return list(pool.map(fn, items))


class PairwiseSum:
    """Streaming pairwise (cascade) summation of arrays pushed in order."""

    def __init__(self):
        self._stack = []  # (level, partial)

    def push(self, value):
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            value = prev + value
            level += 1
        self._stack.append((level, value))

    def total(self):
        if not self._stack:
            return None
        out = self._stack[-1][1]
        for _, part in reversed(self._stack[:-1]):
            out = part + out
        return out
