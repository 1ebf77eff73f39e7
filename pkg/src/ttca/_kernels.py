"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba versions are used when numba imports and ``TTCA_DISABLE_NUMBA`` is
unset (or ``0``).  Both implementations are always importable under the
``*_numpy`` / ``*_numba`` names so tests and benchmarks can compare them.
"""
import os

import numpy as np


def _numba_requested():
    flag = os.environ.get("TTCA_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no", "off")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if (HAVE_NUMBA and _numba_requested()) else "numpy"


# ---------------------------------------------------------------------------
# maxvol row swaps
# ---------------------------------------------------------------------------

def maxvol_swaps_numpy(B, rows, tol, max_iters):
    """Greedy row swaps on the coefficient matrix ``B = A A[rows]^-1``.

    ``B`` and ``rows`` are updated in place.  Returns the number of swaps and
    the pivot magnitudes (each one is the factor by which |det| grew).
    """
    n, r = B.shape
    gains = np.empty(max_iters)
    it = 0
    while it < max_iters:
        k = int(np.argmax(np.abs(B)))
        i, j = divmod(k, r)
        piv = B[i, j]
        if abs(piv) <= 1.0 + tol:
            break
        v = B[i].copy()
        v[j] -= 1.0
        B -= np.outer(B[:, j], v / piv)
        rows[j] = i
        gains[it] = abs(piv)
        it += 1
    return it, gains[:it].copy()


def _maxvol_swaps_loop(B, rows, tol, max_iters):
    n, r = B.shape
    gains = np.empty(max_iters)
    v = np.empty(r)
    col = np.empty(n)
    it = 0
    while it < max_iters:
        best = -1.0
        bi = 0
        bj = 0
        for i in range(n):
            for j in range(r):
                a = abs(B[i, j])
                if a > best:
                    best = a
                    bi = i
                    bj = j
        if best <= 1.0 + tol:
            break
        piv = B[bi, bj]
        for j in range(r):
            v[j] = B[bi, j]
        v[bj] -= 1.0
        for j in range(r):
            v[j] = v[j] / piv
        for i in range(n):
            col[i] = B[i, bj]
        for i in range(n):
            c = col[i]
            for j in range(r):
                B[i, j] -= c * v[j]
        rows[bj] = bi
        gains[it] = best
        it += 1
    return it, gains[:it].copy()


# ---------------------------------------------------------------------------
# batched TT evaluation
# ---------------------------------------------------------------------------

def tt_eval_batch_numpy(cores, idx):
    """Evaluate a TT at rows of ``idx`` (n, D); ``cores`` is a list of arrays."""
    n = idx.shape[0]
    vec = np.ones((n, 1))
    for d, core in enumerate(cores):
        sl = core[:, idx[:, d], :]  # (r, n, r')
        vec = np.einsum("na,anb->nb", vec, sl)
    return vec[:, 0].copy()


def _tt_eval_flat(flat, offsets, ranks, dims, idx):
    n, D = idx.shape
    out = np.empty(n)
    rmax = 1
    for d in range(D + 1):
        if ranks[d] > rmax:
            rmax = ranks[d]
    cur = np.empty(rmax)
    nxt = np.empty(rmax)
    for s in range(n):
        cur[0] = 1.0
        for d in range(D):
            ra = ranks[d]
            rb = ranks[d + 1]
            I = dims[d]
            i = idx[s, d]
            base = offsets[d]
            for b in range(rb):
                acc = 0.0
                for a in range(ra):
                    acc += cur[a] * flat[base + (a * I + i) * rb + b]
                nxt[b] = acc
            for b in range(rb):
                cur[b] = nxt[b]
        out[s] = cur[0]
    return out


def _flatten_cores(cores):
    flat = np.concatenate([c.ravel() for c in cores])
    sizes = np.array([c.size for c in cores], dtype=np.int64)
    offsets = np.zeros(len(cores), dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)[:-1]
    ranks = np.array([cores[0].shape[0]] + [c.shape[2] for c in cores], dtype=np.int64)
    dims = np.array([c.shape[1] for c in cores], dtype=np.int64)
    return flat, offsets, ranks, dims


# ---------------------------------------------------------------------------
# QTT bit maps (most significant bit first within each dimension's group)
# ---------------------------------------------------------------------------

def qtt_encode_numpy(idx, bits):
    n, D = idx.shape
    out = np.empty((n, int(bits.sum())), dtype=np.int64)
    col = 0
    for d in range(D):
        for b in range(bits[d]):
            out[:, col] = (idx[:, d] >> (bits[d] - 1 - b)) & 1
            col += 1
    return out


def qtt_decode_numpy(vidx, bits):
    n = vidx.shape[0]
    D = bits.shape[0]
    out = np.zeros((n, D), dtype=np.int64)
    col = 0
    for d in range(D):
        for _ in range(bits[d]):
            out[:, d] = (out[:, d] << 1) | vidx[:, col]
            col += 1
    return out


def _qtt_encode_loop(idx, bits):
    n, D = idx.shape
    total = 0
    for d in range(D):
        total += bits[d]
    out = np.empty((n, total), dtype=np.int64)
    for s in range(n):
        col = 0
        for d in range(D):
            nb = bits[d]
            x = idx[s, d]
            for b in range(nb):
                out[s, col] = (x >> (nb - 1 - b)) & 1
                col += 1
    return out


def _qtt_decode_loop(vidx, bits):
    n = vidx.shape[0]
    D = bits.shape[0]
    out = np.zeros((n, D), dtype=np.int64)
    for s in range(n):
        col = 0
        for d in range(D):
            x = 0
            for _ in range(bits[d]):
                x = (x << 1) | vidx[s, col]
                col += 1
            out[s, d] = x
    return out


if HAVE_NUMBA:
    _maxvol_swaps_nb = numba.njit(cache=False)(_maxvol_swaps_loop)
    _tt_eval_flat_nb = numba.njit(cache=False)(_tt_eval_flat)
    qtt_encode_numba = numba.njit(cache=False)(_qtt_encode_loop)
    qtt_decode_numba = numba.njit(cache=False)(_qtt_decode_loop)

    def maxvol_swaps_numba(B, rows, tol, max_iters):
        return _maxvol_swaps_nb(B, rows, float(tol), int(max_iters))

    def tt_eval_batch_numba(cores, idx):
        flat, offsets, ranks, dims = _flatten_cores(cores)
        return _tt_eval_flat_nb(flat, offsets, ranks, dims, np.ascontiguousarray(idx, dtype=np.int64))
else:  # pragma: no cover
    maxvol_swaps_numba = None
    tt_eval_batch_numba = None
    qtt_encode_numba = None
    qtt_decode_numba = None


if BACKEND == "numba":
    maxvol_swaps = maxvol_swaps_numba
    tt_eval_batch = tt_eval_batch_numba
    qtt_encode = qtt_encode_numba
    qtt_decode = qtt_decode_numba
else:
    maxvol_swaps = maxvol_swaps_numpy
    tt_eval_batch = tt_eval_batch_numpy
    qtt_encode = qtt_encode_numpy
    qtt_decode = qtt_decode_numpy
