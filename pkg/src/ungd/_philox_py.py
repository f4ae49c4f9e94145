"""Pure numpy Philox4x32-10 block function.

Fallback for the compiled ``_philox_cy`` extension; both expose the same
``philox4x32`` signature and must produce identical words.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

ROUNDS = 10


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Apply Philox4x32-10 to broadcastable uint32 counter words.

    ``k0`` and ``k1`` are python ints (the 64-bit key split in halves).
    Returns four uint32 arrays.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(
        *(np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3))
    )
    c0, c1, c2, c3 = c0.copy(), c1.copy(), c2.copy(), c3.copy()
    k0 = int(k0) & 0xFFFFFFFF
    k1 = int(k1) & 0xFFFFFFFF
    for r in range(ROUNDS):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return tuple(c.astype(np.uint32) for c in (c0, c1, c2, c3))


def keyed_words(key, stream, layer, rows, n_cols):
    """Philox words for the counter grid (col, row, layer, stream).

    ``rows`` is a 1-d array of row indices; output arrays have shape
    ``(len(rows), n_cols)``.
    """
    rows = np.asarray(rows, dtype=np.uint64)
    if rows.ndim != 1:
        raise ValueError("rows must be a 1-d array of row indices")
    rows = rows[:, None]
    cols = np.arange(n_cols, dtype=np.uint64)[None, :]
    return philox4x32(cols, rows, layer, stream, key & 0xFFFFFFFF, key >> 32)
