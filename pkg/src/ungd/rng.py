"""Counter-based random numbers keyed by (seed, stream, layer, row, col).

Every draw is a pure function of its coordinates, so results do not depend
on generation order, chunking or thread count.  The Philox block function
comes from the compiled extension when it is importable and from a numpy
fallback otherwise; set ``UNGD_PURE_PYTHON=1`` to force the fallback.
"""

import enum
import os

import numpy as np

from . import _philox_py

if os.environ.get("UNGD_PURE_PYTHON", "") not in ("", "0"):
    _backend = _philox_py
else:
    try:
        from . import _philox_cy as _backend
    except ImportError:  # extension not built
        _backend = _philox_py

BACKEND = "cython" if _backend is not _philox_py else "python"

_MAX_SEED = 2**64


class Stream(enum.IntEnum):
    """Top-level counter word separating independent uses of a seed."""

    WEIGHTS = 1
    BIASES = 2
    MIXERS = 3
    INPUTS = 4
    PERTURB = 5
    DATA = 6
    PROBE = 7
    SELFAVG = 8
    NONCLOSURE = 9
    DERIVE = 0xFFFF


def backend_module(name=None):
    """Return the Philox implementation module (``"cython"`` or ``"python"``)."""
    if name is None:
        return _backend
    if name == "python":
        return _philox_py
    if name == "cython":
        from . import _philox_cy

        return _philox_cy
    raise ValueError(f"unknown backend {name!r}")


def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def _uniform53(hi, lo):
    # 53-bit uniform on [0, 1) from two 32-bit words
    a = (hi >> np.uint32(5)).astype(np.float64)
    b = (lo >> np.uint32(6)).astype(np.float64)
    return (a * 67108864.0 + b) / 9007199254740992.0


def uniforms(seed, stream, layer, rows, n_cols, backend=None):
    """Pairs of uniforms on [0, 1) for the counter grid, each ``(len(rows), n_cols)``."""
    impl = backend_module(backend)
    if np.isscalar(rows):
        rows = np.arange(int(rows), dtype=np.uint32)
    r0, r1, r2, r3 = impl.keyed_words(_check_seed(seed), int(stream), int(layer), rows, int(n_cols))
    return _uniform53(r0, r1), _uniform53(r2, r3)


def normals(seed, stream, layer, rows, n_cols, backend=None):
    """Standard normals at counters ``(col, row, layer, stream)`` under key ``seed``.

    ``rows`` may be an int (meaning ``range(rows)``) or an array of row
    indices.  The Box-Muller transform runs in numpy for both backends so
    that they agree bit for bit.
    """
    u1, u2 = uniforms(seed, stream, layer, rows, n_cols, backend=backend)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def sample_normals(seed, stream, start, count, dim, tag=0, backend=None):
    """Rows ``start .. start+count-1`` of an unbounded N(0, I_dim) sample stream."""
    if start < 0 or start + count > 2**32:
        raise ValueError("sample index out of the 32-bit counter range")
    rows = np.arange(start, start + count, dtype=np.uint64).astype(np.uint32)
    return normals(seed, stream, tag, rows, dim, backend=backend)


def derive_seed(seed, *tags):
    """Hash ``seed`` and up to three small integer tags into a fresh 64-bit seed."""
    if len(tags) > 3:
        raise ValueError("at most three tags")
    words = [int(t) & 0xFFFFFFFF for t in tags] + [0] * (3 - len(tags))
    seed = _check_seed(seed)
    r0, r1, _, _ = _backend.philox4x32(
        words[0], words[1], words[2], int(Stream.DERIVE), seed & 0xFFFFFFFF, seed >> 32
    )
    return (int(np.asarray(r1)) << 32) | int(np.asarray(r0))
