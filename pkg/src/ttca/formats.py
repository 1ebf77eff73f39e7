"""Binary file formats.

CPV1 (dense volume)::

    b"CPV1" | u32 D | D x u64 dims | float64 data, row-major      (little endian)

CPT1 (TT archive)::

    b"CPT1" | u32 D | (D+1) x u32 ranks | D x u64 mode sizes |
    cores d = 1..D, each float64 row-major in (r_{d-1}, I_d, r_d)

CPFB (feature basis) wraps a CPT1 archive::

    b"CPFB" | u32 r | u32 len(tag) | tag (ascii) | u32 len(values) |
    len(values) x float64 singular values | CPT1 archive
"""
import struct

import numpy as np

from .errors import FormatError
from .tt import TTTensor

CPV1_MAGIC = b"CPV1"
CPT1_MAGIC = b"CPT1"
CPFB_MAGIC = b"CPFB"


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: needed {n} bytes at offset {self.pos}, "
                              f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def u64(self, count=1):
        return struct.unpack(f"<{count}Q", self.take(8 * count))

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _read_bytes(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        return bytes(path_or_bytes)
    with open(path_or_bytes, "rb") as fh:
        return fh.read()


def cpv1_bytes(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    head = CPV1_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def write_cpv1(path, a):
    with open(path, "wb") as fh:
        fh.write(cpv1_bytes(a))


def read_cpv1(path_or_bytes):
    r = _Reader(_read_bytes(path_or_bytes), "CPV1 volume")
    if r.take(4) != CPV1_MAGIC:
        raise FormatError("bad magic: not a CPV1 volume")
    (D,) = r.u32()
    if D == 0:
        raise FormatError("CPV1 volume with zero dimensions")
    dims = r.u64(D)
    n = int(np.prod(dims, dtype=object))
    data = r.f64(n)
    if r.pos != len(r.buf):
        raise FormatError(f"CPV1 volume has {len(r.buf) - r.pos} trailing bytes")
    return data.reshape(dims)


def read_cpv1_header(path):
    """Shape of a CPV1 file without loading its data."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CPV1_MAGIC:
            raise FormatError("bad magic: not a CPV1 volume")
        (D,) = struct.unpack("<I", head[4:])
        raw = fh.read(8 * D)
        if len(raw) < 8 * D:
            raise FormatError("truncated CPV1 header")
        return struct.unpack(f"<{D}Q", raw)


def cpt1_bytes(t):
    parts = [CPT1_MAGIC, struct.pack("<I", t.ndim),
             struct.pack(f"<{t.ndim + 1}I", *t.ranks),
             struct.pack(f"<{t.ndim}Q", *t.shape)]
    parts += [np.ascontiguousarray(c, dtype="<f8").tobytes() for c in t.cores]
    return b"".join(parts)


def write_cpt1(path, t):
    with open(path, "wb") as fh:
        fh.write(cpt1_bytes(t))


def _parse_cpt1(r):
    if r.take(4) != CPT1_MAGIC:
        raise FormatError("bad magic: not a CPT1 archive")
    (D,) = r.u32()
    if D == 0:
        raise FormatError("CPT1 archive with zero cores")
    ranks = r.u32(D + 1)
    dims = r.u64(D)
    if ranks[0] != 1 or ranks[-1] != 1:
        raise FormatError(f"CPT1 boundary ranks must be 1, got {ranks}")
    cores = []
    for d in range(D):
        n = ranks[d] * dims[d] * ranks[d + 1]
        cores.append(r.f64(n).reshape(ranks[d], dims[d], ranks[d + 1]))
    return TTTensor(cores)


def read_cpt1(path_or_bytes):
    r = _Reader(_read_bytes(path_or_bytes), "CPT1 archive")
    t = _parse_cpt1(r)
    if r.pos != len(r.buf):
        raise FormatError(f"CPT1 archive has {len(r.buf) - r.pos} trailing bytes")
    return t


def cpfb_bytes(tt, rank, tag, values):
    tag = tag.encode("ascii")
    values = np.ascontiguousarray(values, dtype="<f8")
    return (CPFB_MAGIC + struct.pack("<II", rank, len(tag)) + tag
            + struct.pack("<I", values.size) + values.tobytes() + cpt1_bytes(tt))


def read_cpfb(path_or_bytes):
    """Return ``(tt, rank, tag, values)`` from a CPFB archive."""
    r = _Reader(_read_bytes(path_or_bytes), "CPFB archive")
    if r.take(4) != CPFB_MAGIC:
        raise FormatError("bad magic: not a CPFB feature basis")
    rank, ntag = r.u32(2)
    tag = r.take(ntag).decode("ascii")
    (nval,) = r.u32()
    values = r.f64(nval)
    tt = _parse_cpt1(r)
    if r.pos != len(r.buf):
        raise FormatError("CPFB archive has trailing bytes")
    return tt, rank, tag, values
