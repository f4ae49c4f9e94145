# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Philox4x32-10 counter grid.

Mirrors ``ungd._philox_py.keyed_words``; output must match it word for word.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, uint64_t

cnp.import_array()

cdef extern from *:
    """
    #define PHILOX_M0 0xD2511F53U
    #define PHILOX_M1 0xCD9E8D57U
    #define PHILOX_W0 0x9E3779B9U
    #define PHILOX_W1 0xBB67AE85U
    """
    uint32_t M0 "PHILOX_M0"
    uint32_t M1 "PHILOX_M1"
    uint32_t W0 "PHILOX_W0"
    uint32_t W1 "PHILOX_W1"


cdef inline void _block(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t c0 = c[0], c1 = c[1], c2 = c[2], c3 = c[3]
    cdef int r
    for r in range(10):
        if r:
            k0 = <uint32_t>(k0 + W0)
            k1 = <uint32_t>(k1 + W1)
        p0 = <uint64_t>M0 * c0
        p1 = <uint64_t>M1 * c2
        c0 = <uint32_t>(p1 >> 32) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = <uint32_t>(p0 >> 32) ^ c3 ^ k1
        c3 = <uint32_t>p0
    c[0] = c0
    c[1] = c1
    c[2] = c2
    c[3] = c3


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Elementwise Philox4x32-10 over broadcastable counter words."""
    b = np.broadcast_arrays(np.asarray(c0, dtype=np.uint32), np.asarray(c1, dtype=np.uint32),
                            np.asarray(c2, dtype=np.uint32), np.asarray(c3, dtype=np.uint32))
    shape = b[0].shape
    arr = np.ascontiguousarray(np.stack([x.ravel() for x in b], axis=1))
    cdef uint32_t[:, ::1] ctr = arr
    cdef uint32_t kk0 = <uint32_t>(int(k0) & 0xFFFFFFFF)
    cdef uint32_t kk1 = <uint32_t>(int(k1) & 0xFFFFFFFF)
    cdef Py_ssize_t i, n = ctr.shape[0]
    with nogil:
        for i in range(n):
            _block(&ctr[i, 0], kk0, kk1)
    return tuple(arr[:, j].reshape(shape).copy() for j in range(4))


def keyed_words(uint64_t key, uint32_t stream, uint32_t layer, rows, Py_ssize_t n_cols):
    """Philox words for the counter grid (col, row, layer, stream)."""
    rows = np.asarray(rows)
    if rows.ndim != 1:
        raise ValueError("rows must be a 1-d array of row indices")
    cdef const uint32_t[::1] r = np.ascontiguousarray(rows, dtype=np.uint32)
    cdef Py_ssize_t n_rows = r.shape[0]
    out = np.empty((4, n_rows, n_cols), dtype=np.uint32)
    cdef uint32_t[:, :, ::1] o = out
    cdef uint32_t k0 = <uint32_t>(key & 0xFFFFFFFF)
    cdef uint32_t k1 = <uint32_t>(key >> 32)
    cdef uint32_t c[4]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n_rows):
            for j in range(n_cols):
                c[0] = <uint32_t>j
                c[1] = r[i]
                c[2] = layer
                c[3] = stream
                _block(c, k0, k1)
                o[0, i, j] = c[0]
                o[1, i, j] = c[1]
                o[2, i, j] = c[2]
                o[3, i, j] = c[3]
    return out[0], out[1], out[2], out[3]
