"""Shapes, multi-indices, black-box entry oracles and the QTT index bijection.

Conventions: indices are zero-based and tensors are row-major (last index
fastest).  Dense tensors are plain float64 :class:`numpy.ndarray` objects.
"""
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError

INDEX_MAX = np.iinfo(np.int64).max


def as_shape(dims):
    """Validate ``dims`` and return it as a tuple of Python ints."""
    dims = tuple(int(n) for n in np.atleast_1d(dims))
    if len(dims) == 0:
        raise ConfigurationError("shape needs at least one dimension")
    if any(n < 1 for n in dims):
        raise ConfigurationError(f"all dimensions must be >= 1, got {dims}")
    if math.prod(dims) > INDEX_MAX:
        raise OverflowError(f"element count of shape {dims} exceeds the int64 index range")
    return dims


def element_count(shape):
    return math.prod(as_shape(shape))


def check_indices(shape, idx):
    """Return ``idx`` as an (n, D) int64 array, raising IndexError when out of range."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None, :]
    if idx.ndim != 2 or idx.shape[1] != len(shape):
        raise IndexError(f"expected indices with {len(shape)} coordinates, got array of shape {idx.shape}")
    if idx.size:
        bad = (idx < 0) | (idx >= np.asarray(shape, dtype=np.int64))
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise IndexError(f"index {tuple(int(i) for i in idx[row])} out of range for shape {tuple(shape)}")
    return idx


def linear_index(shape, idx):
    """Row-major offset of a single multi-index."""
    shape = as_shape(shape)
    idx = check_indices(shape, idx)[0]
    offset = 0
    for n, i in zip(shape, idx):
        offset = offset * n + int(i)
    return offset


def delinearize(shape, offset):
    """Inverse of :func:`linear_index`."""
    shape = as_shape(shape)
    offset = int(offset)
    if not 0 <= offset < math.prod(shape):
        raise IndexError(f"offset {offset} out of range for shape {shape}")
    coords = []
    for n in reversed(shape):
        offset, i = divmod(offset, n)
        coords.append(i)
    return tuple(reversed(coords))


class ResidencyMeter:
    """Counts oracle values currently held in memory and records the peak."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self, n):
        self.current += int(n)
        self.peak = max(self.peak, self.current)

    def release(self, n):
        self.current -= int(n)


class TensorOracle:
    """Black-box access to the entries of a tensor of a given shape.

    ``func`` maps an (n, D) int64 array of multi-indices to n float64 values
    and must be pure.  Every value handed out is counted in :attr:`samples`.
    """

    def __init__(self, shape, func, name=None):
        self.shape = as_shape(shape)
        self.name = name
        self._func = func
        self._lock = threading.Lock()
        self._samples = 0

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def samples(self):
        return self._samples

    def _count(self, n):
        with self._lock:
            self._samples += n

    def entries(self, idx):
        idx = check_indices(self.shape, idx)
        if idx.shape[0] == 0:
            return np.empty(0)
        vals = np.asarray(self._func(idx), dtype=np.float64).reshape(-1)
        if vals.shape[0] != idx.shape[0]:
            raise ValueError(f"oracle returned {vals.shape[0]} values for {idx.shape[0]} indices")
        self._count(idx.shape[0])
        return vals

    def entry(self, idx):
        return float(self.entries(np.asarray(idx, dtype=np.int64)[None, :])[0])

    def fiber(self, prefix, d, suffix):
        """Values along mode ``d`` with the other coordinates fixed."""
        left = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        right = np.asarray(suffix, dtype=np.int64).reshape(1, -1)
        return self.fibers(left, d, right)[0, :, 0]

    def fibers(self, left, d, right, batch_size=None, meter=None):
        """Sample the block ``X[left, :, right]`` of shape (len(left), I_d, len(right)).

        ``left`` holds prefixes of length ``d`` and ``right`` suffixes of length
        ``D - d - 1``.  With ``batch_size`` the index array is materialized in
        chunks of at most that many entries.
        """
        idx = fiber_indices(self.shape, left, d, right)
        n = idx.shape[0]
        out = np.empty(n)
        step = n if not batch_size else int(batch_size)
        for s in range(0, n, max(step, 1)):
            out[s:s + step] = self.entries(idx[s:s + step])
        if meter is not None:
            meter.acquire(n)
        return out.reshape(left.shape[0], self.shape[d], right.shape[0])


def fiber_indices(shape, left, d, right):
    """Multi-indices of ``X[left, :, right]`` in (a, i, b) row-major order."""
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if left.ndim != 2 or left.shape[1] != d:
        raise IndexError(f"left index set must have shape (n, {d}), got {left.shape}")
    if right.ndim != 2 or right.shape[1] != len(shape) - d - 1:
        raise IndexError(f"right index set must have shape (n, {len(shape) - d - 1}), got {right.shape}")
    ra, rb, n = left.shape[0], right.shape[0], shape[d]
    out = np.empty((ra, n, rb, len(shape)), dtype=np.int64)
    out[..., :d] = left[:, None, None, :]
    out[..., d] = np.arange(n)[None, :, None]
    out[..., d + 1:] = right[None, None, :, :]
    return out.reshape(-1, len(shape))


def dense_oracle(t):
    """Oracle reading entries of an in-memory array (test adapter)."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("dense tensor has non-finite entries")

    def func(idx):
        return t[tuple(idx.T)]

    return TensorOracle(t.shape, func, name="dense")


def function_oracle(shape, fn, name=None):
    """Oracle from a vectorized function of an (n, D) index array."""
    return TensorOracle(shape, fn, name=name)


@dataclass(frozen=True)
class QttMap:
    """Bijection between a tensor of shape (I_1..I_D) and a 2 x ... x 2 tensor.

    Each original coordinate expands into ``bits[d]`` binary coordinates,
    most significant first, and dimension groups are concatenated in order.
    With ``pad=True`` non-power-of-two sizes are zero-padded up.
    """

    shape: tuple
    bits: tuple
    pad: bool = False

    @classmethod
    def build(cls, shape, pad=False):
        shape = as_shape(shape)
        bits = []
        for n in shape:
            b = int(n - 1).bit_length()
            if (1 << b) != n and not pad:
                raise ConfigurationError(
                    f"dimension {n} is not a power of two; enable padding to map it to QTT")
            bits.append(b)
        if sum(bits) == 0:
            raise ConfigurationError("QTT map of a single-element tensor has no virtual dimensions")
        return cls(shape, tuple(bits), pad)

    @property
    def padded_shape(self):
        return tuple(1 << b for b in self.bits)

    @property
    def virtual_shape(self):
        return (2,) * sum(self.bits)

    @property
    def is_padded(self):
        return self.padded_shape != self.shape

    def forward(self, idx):
        idx = check_indices(self.shape, idx)
        return _kernels.qtt_encode(idx, np.asarray(self.bits, dtype=np.int64))

    def backward(self, vidx):
        vidx = check_indices(self.virtual_shape, vidx)
        return _kernels.qtt_decode(vidx, np.asarray(self.bits, dtype=np.int64))


def qtt_forward(qmap, idx):
    return tuple(int(b) for b in qmap.forward(idx)[0])


def qtt_backward(qmap, vidx):
    return tuple(int(i) for i in qmap.backward(vidx)[0])


def virtual_oracle(oracle, qmap):
    """Oracle over the QTT virtual shape that forwards to ``oracle``.

    Padding entries evaluate to zero without touching the wrapped oracle.
    """
    if tuple(oracle.shape) != tuple(qmap.shape):
        raise ConfigurationError(f"QTT map for shape {qmap.shape} does not match oracle shape {oracle.shape}")
    bits = np.asarray(qmap.bits, dtype=np.int64)
    limits = np.asarray(qmap.shape, dtype=np.int64)

    def func(vidx):
        idx = _kernels.qtt_decode(vidx, bits)
        if not qmap.is_padded:
            return oracle.entries(idx)
        inside = np.all(idx < limits, axis=1)
        out = np.zeros(idx.shape[0])
        out[inside] = oracle.entries(idx[inside])
        return out

    return TensorOracle(qmap.virtual_shape, func, name=f"qtt({oracle.name})")
