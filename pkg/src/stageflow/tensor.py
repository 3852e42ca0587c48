"""Dense tensor values and host interchange.

A Tensor is immutable once constructed and is either *concrete* (it owns a
row-major buffer resident on some device) or *symbolic* (a reference to a
node output inside one open trace; it has a dtype and shape but no data).
Symbolic tensors never escape the trace that made them: any attempt to read
their data raises ``SymbolicTensor``.

Storage is a read-only numpy array. All mutable state in the runtime lives
in variables (see ``state``), which own their buffers separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from . import dtypes
from .devices import DeviceName
from .dtypes import DType, Shape, SymShape
from .errors import LengthMismatch, NarrowingOverflow, SymbolicTensor

broadcast_shapes = dtypes.broadcast_shapes

_INT32_MIN = -(2**31)
_INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class SymbolicRef:
    """Identity of a node output inside one trace."""

    trace_id: int
    ref: Any  # builder-level value reference, owned by graph.GraphBuilder


class Tensor:
    __slots__ = ("dtype", "shape", "device", "_array", "_symbolic", "_born_trace")

    def __init__(
        self,
        dtype: DType,
        shape: SymShape,
        device: DeviceName,
        array: Optional[np.ndarray] = None,
        symbolic: Optional[SymbolicRef] = None,
    ):
        if (array is None) == (symbolic is None):
            raise ValueError("tensor must be exactly one of concrete or symbolic")
        self.dtype = dtype
        self.shape = tuple(shape)
        self.device = device
        self._array = array
        self._symbolic = symbolic
        self._born_trace = _current_trace_id()

    # -- construction ------------------------------------------------------

    @staticmethod
    def _wrap(array: np.ndarray, device: DeviceName) -> "Tensor":
        """Adopt a freshly computed numpy array without copying."""
        if array.dtype not in dtypes._FROM_NP:
            raise TypeError(f"kernel produced unsupported dtype {array.dtype}")
        array = np.asarray(array, order="C")
        if array.flags.writeable:
            array.flags.writeable = False
        return Tensor(
            dtypes.from_np_dtype(array.dtype), array.shape, device, array=array
        )

    # -- predicates --------------------------------------------------------

    @property
    def is_symbolic(self) -> bool:
        return self._symbolic is not None

    @property
    def symbolic_ref(self) -> SymbolicRef:
        assert self._symbolic is not None
        return self._symbolic

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return dtypes.element_count(self.shape)

    # -- data access -------------------------------------------------------

    def raw(self) -> np.ndarray:
        """The backing array, read-only, no copy. Concrete tensors only."""
        if self._array is None:
            raise SymbolicTensor(
                "symbolic tensor has no data; it is only valid inside its trace"
            )
        return self._array

    def numpy(self) -> np.ndarray:
        """A mutable host copy of the data."""
        return self.raw().copy()

    def item(self) -> Union[float, int, bool]:
        return self.raw().reshape(-1)[0].item()

    def __float__(self) -> float:
        return float(self.item())

    def __repr__(self) -> str:
        if self.is_symbolic:
            return f"<symbolic Tensor {self.dtype.value}{list(self.shape)}>"
        return (
            f"Tensor({self._array!r}, dtype={self.dtype.value}, "
            f"device={self.device.render()!r})"
        )

    # Arithmetic operators are installed by stageflow.ops at import time so
    # that this module stays free of dispatch machinery.


def _current_trace_id() -> Optional[int]:
    from .runtime import current_context

    ctx = current_context()
    if ctx.traces:
        return ctx.traces[-1].trace_id
    return None


def _default_device() -> DeviceName:
    from .runtime import get_runtime

    return get_runtime().devices[0].name


def tensor_from_host(
    data: Sequence, shape: Sequence[int], dtype: DType
) -> Tensor:
    """Build a concrete tensor from a flat host sequence.

    The data is copied; the caller's buffer is never aliased. Values must be
    representable in ``dtype`` (int32 range-checks, NarrowingOverflow
    otherwise).
    """
    shape = dtypes.check_shape(shape)
    flat = np.asarray(data).reshape(-1)
    if flat.size != dtypes.element_count(shape):
        raise LengthMismatch(
            f"{flat.size} values cannot fill shape {list(shape)} "
            f"({dtypes.element_count(shape)} elements)"
        )
    if dtype is DType.int32 and flat.size:
        as_int = flat.astype(np.int64)
        if np.any(as_int != flat):
            raise NarrowingOverflow("non-integral value for int32 tensor")
        if as_int.min() < _INT32_MIN or as_int.max() > _INT32_MAX:
            raise NarrowingOverflow("value out of int32 range")
    array = flat.astype(dtype.np_dtype).reshape(shape).copy()
    array.flags.writeable = False
    return Tensor(dtype, shape, _default_device(), array=array)


def to_host(t: Tensor) -> Tuple[list, Shape, DType]:
    """Fetch a tensor's data as (flat row-major list, shape, dtype).

    Round-trips bit-exactly with ``tensor_from_host``. Raises
    ``SymbolicTensor`` for symbolic values.
    """
    arr = t.raw()
    return arr.reshape(-1).tolist(), t.shape, t.dtype


def constant(value, dtype: Optional[DType] = None) -> Tensor:
    """Convenience constructor from nested sequences / scalars / arrays.

    Python floats default to float32, ints to int32, bools to boolean.
    """
    if isinstance(value, Tensor):
        if dtype is not None and value.dtype is not dtype:
            raise TypeError(f"tensor already has dtype {value.dtype.value}")
        return value
    arr = np.asarray(value)
    if dtype is None:
        if arr.dtype.kind == "b":
            dtype = DType.boolean
        elif arr.dtype.kind in "iu":
            dtype = DType.int32
        elif arr.dtype == np.float64 and isinstance(value, np.ndarray):
            dtype = DType.float64
        elif arr.dtype.kind == "f":
            dtype = DType.float32
        else:
            dtype = dtypes.from_np_dtype(arr.dtype)  # raises for exotic dtypes
    return tensor_from_host(arr.reshape(-1), arr.shape, dtype)
