"""Element types and shape arithmetic.

The dtype set is a closed enumeration of four entries: two float widths for
differentiable math, int32 for indices and counters, and boolean for
predicates. There is no implicit promotion anywhere in the runtime; mixing
dtypes in an elementwise op is an error.

Shapes are plain tuples of non-negative extents. Inside a trace a dimension
may be ``None``, meaning "unknown until execution" (used by pinned signatures
with wildcard dims).
"""
from __future__ import annotations

import enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import BroadcastIncompatible

Shape = Tuple[int, ...]
# Shapes of symbolic values may contain wildcard (unknown) dims.
SymShape = Tuple[Optional[int], ...]


class DType(enum.Enum):
    float32 = "float32"
    float64 = "float64"
    int32 = "int32"
    boolean = "boolean"

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self]

    @property
    def width(self) -> int:
        return int(self.np_dtype.itemsize)

    @property
    def is_float(self) -> bool:
        return self in (DType.float32, DType.float64)

    def __repr__(self) -> str:
        return f"DType.{self.value}"


float32 = DType.float32
float64 = DType.float64
int32 = DType.int32
boolean = DType.boolean

_NP_DTYPES = {
    DType.float32: np.dtype(np.float32),
    DType.float64: np.dtype(np.float64),
    DType.int32: np.dtype(np.int32),
    DType.boolean: np.dtype(np.bool_),
}

_FROM_NP = {v: k for k, v in _NP_DTYPES.items()}

# Stable single-byte tags, used by the wire formats and trace keys.
DTYPE_TAGS = {
    DType.float32: 1,
    DType.float64: 2,
    DType.int32: 3,
    DType.boolean: 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def from_np_dtype(dt: np.dtype) -> DType:
    try:
        return _FROM_NP[np.dtype(dt)]
    except KeyError:
        raise TypeError(f"unsupported numpy dtype {dt!r}") from None


def check_shape(dims: Iterable[int]) -> Shape:
    shape = tuple(int(d) for d in dims)
    if any(d < 0 for d in shape):
        raise ValueError(f"negative extent in shape {shape}")
    return shape


def element_count(shape: Sequence[Optional[int]]) -> int:
    n = 1
    for d in shape:
        if d is None:
            raise ValueError("element count of a shape with wildcard dims")
        n *= d
    return n


def is_concrete_shape(shape: Sequence[Optional[int]]) -> bool:
    return all(d is not None for d in shape)


def broadcast_shapes(a: Sequence[Optional[int]], b: Sequence[Optional[int]]) -> SymShape:
    """Right-aligned broadcast of two shapes (NumPy convention).

    Wildcard dims broadcast optimistically: ``None`` against ``1`` or
    ``None`` stays unknown, ``None`` against ``n > 1`` resolves to ``n``
    (validated for real at execution time).
    """
    out = []
    ra, rb = len(a), len(b)
    for i in range(max(ra, rb)):
        da = a[ra - 1 - i] if i < ra else 1
        db = b[rb - 1 - i] if i < rb else 1
        if da is None or db is None:
            known = db if da is None else da
            out.append(None if known in (1, None) else known)
        elif da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise BroadcastIncompatible(
                f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible"
            )
    out.reverse()
    return tuple(out)
