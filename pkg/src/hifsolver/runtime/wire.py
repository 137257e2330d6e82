"""Typed array framing for transport payloads.

Every distributed exchange in this package ships numpy arrays.  The framing
here is deliberately dumb: a count, then per array a dtype string, a shape,
and the raw little-endian bytes.  No pickling, no compression, no alignment
games; the receiving side gets back exactly the arrays that went in, in
order, with dtype and shape intact.

Raw float64 payloads whose layout both sides already know (the dense
redistribution tiles) skip this module and go over the wire as bare
``tobytes()`` buffers; everything with variable shape or mixed dtypes goes
through ``pack_arrays``/``unpack_arrays``.
"""

from __future__ import annotations

import struct

import numpy as np

_HEADER = struct.Struct("<I")
_DIM = struct.Struct("<Q")


def pack_arrays(*arrays: np.ndarray) -> bytes:
    """Serialize arrays into one self-describing byte string."""
    parts = [_HEADER.pack(len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            # note: ascontiguousarray would also promote 0-d input to 1-d,
            # but 0-d arrays are always contiguous and never reach it
            arr = np.ascontiguousarray(arr)
        dt = arr.dtype.str.encode("ascii")
        parts.append(_HEADER.pack(len(dt)))
        parts.append(dt)
        parts.append(_HEADER.pack(arr.ndim))
        for dim in arr.shape:
            parts.append(_DIM.pack(dim))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_arrays(buf: bytes) -> list[np.ndarray]:
    """Inverse of :func:`pack_arrays`."""
    view = memoryview(buf)
    off = 0
    (count,) = _HEADER.unpack_from(view, off)
    off += _HEADER.size
    out = []
    for _ in range(count):
        (dtlen,) = _HEADER.unpack_from(view, off)
        off += _HEADER.size
        dtype = np.dtype(bytes(view[off : off + dtlen]).decode("ascii"))
        off += dtlen
        (ndim,) = _HEADER.unpack_from(view, off)
        off += _HEADER.size
        shape = []
        for _ in range(ndim):
            (dim,) = _DIM.unpack_from(view, off)
            off += _DIM.size
            shape.append(dim)
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(view[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        out.append(arr)
    if off != len(buf):
        raise ValueError(f"trailing {len(buf) - off} bytes after {count} arrays")
    return out
