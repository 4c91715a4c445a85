"""Dense rank-N float tensors with a fixed (sample, V, H, W, channel) axis order.

Values are stored contiguously in row-major order, in either 32-bit
(training default) or 64-bit (gradient-check mode) precision. Every
operation in this module produces a fresh contiguous tensor, never a view,
and validates finiteness on construction: NaN or Inf raises NumericError
instead of propagating silently. Tensors are immutable after construction
and therefore safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError, ShapeError

MAX_RANK = 5

_DTYPES = {32: np.dtype(np.float32), 64: np.dtype(np.float64)}
_PRECISIONS = {np.dtype(np.float32): 32, np.dtype(np.float64): 64}


def dtype_for(precision: int) -> np.dtype:
    if precision not in _DTYPES:
        raise ShapeError(f"precision must be 32 or 64, got {precision}")
    return _DTYPES[precision]


@dataclass(frozen=True)
class Shape:
    """Ordered positive extents; feature maps use (N, V, H, W, C)."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) > MAX_RANK:
            raise ShapeError(f"rank {len(dims)} exceeds maximum {MAX_RANK}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"all extents must be >= 1, got {dims}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def count(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    def flat_index(self, coords: tuple[int, ...]) -> int:
        if len(coords) != self.rank:
            raise ShapeError(f"coordinate rank {len(coords)} != shape rank {self.rank}")
        return int(np.ravel_multi_index(coords, self.dims)) if self.dims else 0

    def coords(self, flat: int) -> tuple[int, ...]:
        if not 0 <= flat < self.count:
            raise ShapeError(f"flat index {flat} out of range for {self.dims}")
        if not self.dims:
            return ()
        return tuple(int(c) for c in np.unravel_index(flat, self.dims))

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)


class Tensor:
    """Immutable contiguous float array plus shape metadata."""

    __slots__ = ("_data", "_shape")

    def __init__(self, data, precision: int | None = None):
        dtype = None if precision is None else dtype_for(precision)
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in _PRECISIONS:
            if not np.issubdtype(arr.dtype, np.number):
                raise ShapeError(f"tensor data must be numeric, got {arr.dtype}")
            arr = arr.astype(np.float32 if precision is None else dtype)
        self._shape = Shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise NumericError(f"non-finite value at flat index {bad}")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for freshly computed arrays; still validates and freezes.
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags.c_contiguous:
            # ascontiguousarray would promote rank-0 to rank-1
            arr = np.ascontiguousarray(arr)
        t._shape = Shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise NumericError(f"non-finite value at flat index {bad}")
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Shape:
        return self._shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self._shape.dims

    @property
    def rank(self) -> int:
        return self._shape.rank

    @property
    def size(self) -> int:
        return self._shape.count

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def precision(self) -> int:
        return _PRECISIONS[self._data.dtype]

    def astype(self, precision: int) -> "Tensor":
        return Tensor._wrap(self._data.astype(dtype_for(precision)))

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() requires a single element, shape is {self.dims}")
        return float(self._data.reshape(()))

    def reshape(self, dims: tuple[int, ...]) -> "Tensor":
        out = Shape(tuple(dims))
        if out.count != self.size:
            raise ShapeError(f"cannot reshape {self.dims} to {tuple(dims)}")
        return Tensor._wrap(self._data.reshape(tuple(dims)).copy())

    def __repr__(self):
        return f"Tensor(shape={self.dims}, dtype=float{self.precision})"


def zeros(dims, precision: int = 32) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(dims), dtype=dtype_for(precision)))


def ones(dims, precision: int = 32) -> Tensor:
    return Tensor._wrap(np.ones(tuple(dims), dtype=dtype_for(precision)))


def full(dims, value: float, precision: int = 32) -> Tensor:
    return Tensor._wrap(np.full(tuple(dims), value, dtype=dtype_for(precision)))


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed precision float{a.precision} vs float{b.precision}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = a[i] + b[i]; shapes must match exactly."""
    _check_same_dtype(a, b, "add")
    if a.dims != b.dims:
        raise ShapeError(f"add: shape mismatch {a.dims} vs {b.dims}")
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow surfaces as NumericError from the constructor, not a warning
        return Tensor._wrap(a.data + b.data)


def broadcastable(target: tuple[int, ...], dims: tuple[int, ...]) -> bool:
    """True when dims equals target up to singleton extents, rank for rank."""
    if len(target) != len(dims):
        return False
    return all(d == t or d == 1 for t, d in zip(target, dims))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = a[i] * b[i], with b broadcast along its singleton dims."""
    _check_same_dtype(a, b, "mul")
    if not broadcastable(a.dims, b.dims):
        raise ShapeError(f"mul: {b.dims} not broadcastable to {a.dims}")
    with np.errstate(over="ignore", invalid="ignore"):
        return Tensor._wrap(a.data * np.broadcast_to(b.data, a.dims))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing (channel) axis; a leads."""
    _check_same_dtype(a, b, "concat")
    if a.rank != b.rank or a.rank < 1 or a.dims[:-1] != b.dims[:-1]:
        raise ShapeError(f"concat: spatial mismatch {a.dims} vs {b.dims}")
    return Tensor._wrap(np.concatenate([a.data, b.data], axis=-1))


def channel_slice(t: Tensor, start: int, stop: int) -> Tensor:
    """Copy of the channel block [start, stop) along the trailing axis."""
    c = t.dims[-1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}, {stop}) invalid for C={c}")
    return Tensor._wrap(t.data[..., start:stop].copy())


_REDUCE_MODES = ("mean", "max", "sum")


def reduce(t: Tensor, axes, mode: str) -> Tensor:
    """Reduce over axes, keeping them as singleton extents; mean = sum / count."""
    if mode not in _REDUCE_MODES:
        raise ShapeError(f"reduce mode must be one of {_REDUCE_MODES}, got {mode!r}")
    axes = tuple(int(a) for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axis in {axes}")
    if any(a < 0 or a >= t.rank for a in axes):
        raise ShapeError(f"axis out of range for rank {t.rank}: {axes}")
    if mode == "sum":
        out = t.data.sum(axis=axes, keepdims=True)
    elif mode == "mean":
        out = t.data.mean(axis=axes, keepdims=True)
    else:
        out = t.data.max(axis=axes, keepdims=True)
    return Tensor._wrap(np.asarray(out, dtype=t.dtype))


def stack(samples: list[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading (sample) axis."""
    if not samples:
        raise ShapeError("stack: empty sample list")
    first = samples[0]
    for s in samples[1:]:
        _check_same_dtype(first, s, "stack")
        if s.dims != first.dims:
            raise ShapeError(f"stack: shape mismatch {s.dims} vs {first.dims}")
    return Tensor._wrap(np.stack([s.data for s in samples], axis=0))


# Binary layout: u64 rank | rank * u64 extents | u8 precision tag | raw values,
# everything little-endian. Used for weight checkpoints.

_TAGS = {32: 1, 64: 2}
_TAG_PRECISION = {1: 32, 2: 64}


def serialize(t: Tensor) -> bytes:
    head = struct.pack("<Q", t.rank)
    head += struct.pack(f"<{t.rank}Q", *t.dims) if t.rank else b""
    head += struct.pack("<B", _TAGS[t.precision])
    payload = t.data.astype(f"<f{t.precision // 8}").tobytes()
    return head + payload


def deserialize(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at offset; returns (tensor, next offset)."""
    try:
        (rank,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        if rank > MAX_RANK:
            raise DataError(f"serialized rank {rank} exceeds maximum {MAX_RANK}")
        dims = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
        offset += 8 * rank
        (tag,) = struct.unpack_from("<B", buf, offset)
        offset += 1
    except struct.error as exc:
        raise DataError(f"truncated tensor header at offset {offset}") from exc
    if tag not in _TAG_PRECISION:
        raise DataError(f"unknown precision tag {tag} at offset {offset - 1}")
    precision = _TAG_PRECISION[tag]
    shape = Shape(tuple(int(d) for d in dims))
    nbytes = shape.count * (precision // 8)
    if len(buf) - offset < nbytes:
        raise DataError(
            f"truncated tensor payload at offset {offset}: "
            f"need {nbytes} bytes, have {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype=f"<f{precision // 8}", count=shape.count, offset=offset)
    arr = arr.astype(dtype_for(precision)).reshape(shape.dims)
    return Tensor._wrap(arr), offset + nbytes
