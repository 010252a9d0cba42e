"""Dense tensor arithmetic on numpy arrays.

Tensors are plain C-contiguous ``np.ndarray`` objects of dtype float64 (default)
or float32. The helpers here add loud shape checking and a deterministic mode in
which reductions accumulate strictly left to right.
"""
import contextlib
import hashlib
import struct

import numpy as np

from .errors import ShapeError

DTYPES = {"float64": np.float64, "float32": np.float32}
_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _TAGS.items()}

_deterministic = True


def is_deterministic():
    return _deterministic


def set_deterministic(flag):
    global _deterministic
    _deterministic = bool(flag)


@contextlib.contextmanager
def deterministic(flag=True):
    prev = _deterministic
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(prev)


def tensor(data, dtype="float64"):
    """Copy ``data`` into a new contiguous tensor."""
    dt = DTYPES[dtype] if isinstance(dtype, str) else dtype
    out = np.array(data, dtype=dt, copy=True, order="C")
    if out.ndim and 0 in out.shape:
        raise ShapeError(f"tensor dimensions must be positive, got {out.shape}")
    return out


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(op, a, b=None):
    """Pointwise ops.

    ``op`` is one of add, sub, mul, scale, relu, relu_grad_mask. ``scale`` takes a
    scalar ``b``; ``relu_grad_mask(x, g)`` passes ``g`` where ``x > 0``.
    """
    if op == "relu":
        return np.maximum(a, 0.0).astype(a.dtype, copy=False)
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale expects a scalar factor")
        return a * a.dtype.type(b)
    if b is None:
        raise ShapeError(f"{op} needs two operands")
    _same_shape(a, b, op)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "relu_grad_mask":
        return np.where(a > 0, b, b.dtype.type(0))
    raise ValueError(f"unknown elementwise op {op!r}")


def _sequential_sum(flat):
    if flat.size == 0:
        return flat.dtype.type(0)
    # cumsum accumulates strictly in index order, unlike np.sum's pairwise tree
    return np.cumsum(flat)[-1]


def reduce(op, t):
    flat = np.ravel(t)
    if op == "sum":
        return _sequential_sum(flat) if _deterministic else flat.sum()
    if op == "mean":
        return reduce("sum", flat) / flat.size
    if op == "l2sq":
        return reduce("sum", flat * flat)
    raise ValueError(f"unknown reduction {op!r}")


def global_norm(arrays):
    """Euclidean norm of a list of tensors viewed as one concatenated vector."""
    total = 0.0
    for a in arrays:
        total += float(reduce("l2sq", a))
    return float(np.sqrt(total))


def digest(arrays):
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def to_bytes(t):
    """Serialize: rank u32, dims u32 each, dtype tag u8, little-endian payload."""
    t = np.asarray(t)
    if t.dtype not in _TAGS:
        raise TypeError(f"unsupported dtype {t.dtype}")
    head = struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    head += struct.pack("<B", _TAGS[t.dtype])
    return head + np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes()


def from_bytes(buf, offset=0):
    """Inverse of :func:`to_bytes`. Returns ``(tensor, next_offset)``."""
    mv = memoryview(buf)
    try:
        (rank,) = struct.unpack_from("<I", mv, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", mv, offset)
        offset += 4 * rank
        (tag,) = struct.unpack_from("<B", mv, offset)
        offset += 1
    except struct.error as exc:
        raise ValueError("truncated tensor header") from exc
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag].newbyteorder("<")
    n = int(np.prod(dims, dtype=np.int64))
    nbytes = n * dt.itemsize
    if offset + nbytes > len(mv):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(mv, dtype=dt, count=n, offset=offset).reshape(dims)
    return arr.astype(_TAG_DTYPES[tag]), offset + nbytes
