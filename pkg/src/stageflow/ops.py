"""Op schemas and the dual dispatcher.

Every primitive operation is described by an OpDef: arity, attr schema,
statefulness, kernel, inference rule, and (if differentiable) a gradient
rule. Dispatch takes the same call in two directions depending on the
current execution context:

* eager: inputs are transparently moved to the resolved device, the kernel
  runs immediately, and the call is recorded on any active tape watching one
  of its inputs;
* graph building: a node is appended to the open trace and symbolic outputs
  come back. No kernel runs (constants embed their value directly).

The user-facing wrappers at the bottom (``add``, ``matmul``, ...) are thin:
they coerce plain Python values to tensors and call dispatch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels as _k
from .devices import DeviceName
from .dtypes import DType, float32
from .errors import (
    ArityMismatch,
    AttrMismatch,
    DuplicateOp,
    KernelError,
    StageflowError,
    SymbolicTensor,
    UnknownOp,
)
from .runtime import ExecutionContext, current_context, get_runtime
from .tensor import Tensor, constant as _constant_tensor

# Attr value kinds.
INT, FLOAT, BOOL, STRING, DTYPE, SHAPE, AXES, TENSOR, FUNCTION = (
    "int", "float", "bool", "string", "dtype", "shape", "axes", "tensor", "function",
)


@dataclass(frozen=True)
class OpDef:
    name: str
    input_arity: Optional[int]  # None = variadic
    attr_schema: Dict[str, Tuple[str, bool]]  # name -> (kind, required)
    output_arity: Optional[int]
    stateful: bool
    kernel: Callable
    infer: Callable
    gradient: Optional[Callable] = None
    var_positions: Tuple[int, ...] = ()

    @property
    def differentiable(self) -> bool:
        return self.gradient is not None


class OpRegistry:
    """Immutable after startup apart from explicit register_op calls."""

    def __init__(self):
        self._defs: Dict[str, OpDef] = {}

    def register(self, op_def: OpDef) -> None:
        if op_def.name in self._defs:
            raise DuplicateOp(f"op {op_def.name!r} is already registered")
        self._defs[op_def.name] = op_def

    def get(self, name: str) -> OpDef:
        try:
            return self._defs[name]
        except KeyError:
            raise UnknownOp(f"unknown op {name!r}") from None

    def all_defs(self) -> List[OpDef]:
        return list(self._defs.values())


def _schema(**attrs) -> Dict[str, Tuple[str, bool]]:
    """attrs: name=kind for required, name=(kind, False) for optional."""
    out = {}
    for name, spec in attrs.items():
        if isinstance(spec, tuple):
            out[name] = spec
        else:
            out[name] = (spec, True)
    return out


def build_registry() -> OpRegistry:
    from . import gradients

    grads = gradients.GRADIENTS
    reg = OpRegistry()

    def op(name, arity, out_arity, stateful=False, var_positions=(), **attrs):
        reg.register(
            OpDef(
                name=name,
                input_arity=arity,
                attr_schema=_schema(**attrs),
                output_arity=out_arity,
                stateful=stateful,
                kernel=_k.KERNELS[name],
                infer=_k.INFERENCE[name],
                gradient=grads.get(name),
                var_positions=var_positions,
            )
        )

    op("constant", 0, 1, value=TENSOR)
    op("identity", 1, 1)
    op("add", 2, 1)
    op("sub", 2, 1)
    op("mul", 2, 1)
    op("div", 2, 1)
    op("neg", 1, 1)
    op("exp", 1, 1)
    op("log", 1, 1)
    op("softplus", 1, 1)
    op("relu", 1, 1)
    op("step_positive", 1, 1)
    op("matmul", 2, 1)
    op("transpose", 1, 1)
    op("greater", 2, 1)
    op("reshape", 1, 1, shape=SHAPE)
    op("broadcast_to", 1, 1, shape=SHAPE)
    op("reduce_sum", 1, 1, axes=(AXES, False), keepdims=(BOOL, False))
    op("reduce_mean", 1, 1, axes=(AXES, False), keepdims=(BOOL, False))
    op("eye", 0, 1, size=INT, dtype=DTYPE)
    op("random_normal", 0, 1, stateful=True, shape=SHAPE, dtype=DTYPE)
    op("dropout", 1, 2, stateful=True, rate=FLOAT)
    op("read_variable", 1, 1, stateful=True, var_positions=(0,))
    op("assign_variable", 2, 0, stateful=True, var_positions=(0,))
    op("assign_add_variable", 2, 0, stateful=True, var_positions=(0,))
    op("call_function", None, None, function=FUNCTION)
    op(
        "cond", None, None,
        then_branch=FUNCTION, else_branch=FUNCTION,
        n_operands=INT, n_then_captured=INT, n_else_captured=INT,
    )
    op(
        "while_loop", None, None,
        loop_cond=FUNCTION, loop_body=FUNCTION,
        n_vars=INT, n_cond_captured=INT, n_body_captured=INT,
    )
    op("host_call", None, None, stateful=True, callback=INT)
    return reg


def register_op(op_def: OpDef) -> None:
    """Register a custom op with the live runtime; DuplicateOp on reuse."""
    get_runtime().registry.register(op_def)


def get_op_def(name: str) -> OpDef:
    return get_runtime().registry.get(name)


def kernel_table() -> List[OpDef]:
    """The built-in op set (plus anything registered since startup)."""
    return get_runtime().registry.all_defs()


# ---------------------------------------------------------------------------
# Attr canonicalization
# ---------------------------------------------------------------------------


def canonicalize_attrs(op_def: OpDef, attrs: Optional[dict]) -> Dict[str, Any]:
    attrs = attrs or {}
    out: Dict[str, Any] = {}
    for name in sorted(attrs):
        if name not in op_def.attr_schema:
            raise AttrMismatch(f"{op_def.name}: unexpected attr {name!r}")
        value = attrs[name]
        kind, _ = op_def.attr_schema[name]
        out[name] = _check_attr(op_def.name, name, kind, value)
    for name, (kind, required) in op_def.attr_schema.items():
        if required and name not in out:
            raise AttrMismatch(f"{op_def.name}: missing required attr {name!r}")
    return out


def _check_attr(op: str, name: str, kind: str, value):
    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise AttrMismatch(f"{op}.{name} must be an int, got {value!r}")
        return int(value)
    if kind == FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.floating)):
            raise AttrMismatch(f"{op}.{name} must be a float, got {value!r}")
        return float(value)
    if kind == BOOL:
        if not isinstance(value, (bool, np.bool_)):
            raise AttrMismatch(f"{op}.{name} must be a bool, got {value!r}")
        return bool(value)
    if kind == STRING:
        if not isinstance(value, str):
            raise AttrMismatch(f"{op}.{name} must be a string, got {value!r}")
        return value
    if kind == DTYPE:
        if not isinstance(value, DType):
            raise AttrMismatch(f"{op}.{name} must be a DType, got {value!r}")
        return value
    if kind == SHAPE:
        try:
            dims = tuple(
                None if d is None else int(d) for d in value
            )
        except TypeError:
            raise AttrMismatch(f"{op}.{name} must be a shape, got {value!r}") from None
        if any(d is not None and d < 0 for d in dims):
            raise AttrMismatch(f"{op}.{name}: negative extent in {dims}")
        return dims
    if kind == AXES:
        if value is None:
            return None
        try:
            return tuple(int(a) for a in value)
        except TypeError:
            raise AttrMismatch(f"{op}.{name} must be axes, got {value!r}") from None
    if kind == TENSOR:
        if not isinstance(value, Tensor) or value.is_symbolic:
            raise AttrMismatch(f"{op}.{name} must be a concrete tensor")
        return value
    if kind == FUNCTION:
        from .graph import GraphFunction

        if not isinstance(value, (str, GraphFunction)):
            raise AttrMismatch(f"{op}.{name} must name a graph function")
        return value
    raise AttrMismatch(f"{op}.{name}: unknown attr kind {kind!r}")


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------


def resolve_placement(
    op_def: OpDef, inputs: Sequence, ctx: ExecutionContext
) -> Tuple[DeviceName, List]:
    """Pick the execution device and transparently copy stray inputs to it.

    Scope wins if set; otherwise the first tensor input's device; otherwise
    the default CPU. Each transparent copy bumps the runtime copy metric.
    """
    rt = get_runtime()
    if len(rt.devices) == 1 and not ctx.device_scopes:
        return rt.devices[0].name, list(inputs)
    target = ctx.scope_device()
    if target is None:
        for x in inputs:
            if isinstance(x, Tensor):
                target = x.device
                break
        else:
            target = rt.devices[0].name
    moved = []
    copies = {}  # one copy per distinct tensor, even when passed twice
    for x in inputs:
        if isinstance(x, Tensor) and x.device != target:
            copy = copies.get(id(x))
            if copy is None:
                copy = Tensor(x.dtype, x.shape, target, array=x.raw())
                copies[id(x)] = copy
                rt.stats.count_copy()
            moved.append(copy)
        else:
            moved.append(x)
    return target, moved


def copy_to(t: Tensor, dst: Union[str, DeviceName]) -> Tensor:
    """Explicitly copy a tensor to a device (identity if already there)."""
    from .devices import resolve_device

    name = resolve_device(dst)
    if t.device == name:
        return t
    return Tensor(t.dtype, t.shape, name, array=t.raw())


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def dispatch(op: str, inputs: Sequence, attrs: Optional[dict] = None) -> List[Tensor]:
    """Run an op eagerly or record it into the open trace."""
    op_def = get_op_def(op)
    if op_def.input_arity is not None and len(inputs) != op_def.input_arity:
        raise ArityMismatch(
            f"{op} takes {op_def.input_arity} inputs, got {len(inputs)}"
        )
    attrs = canonicalize_attrs(op_def, attrs)
    ctx = current_context()
    if ctx.tracing:
        return ctx.current_trace.record(op_def, list(inputs), attrs)
    return _dispatch_eager(op_def, list(inputs), attrs, ctx)


def input_spec(x) -> Tuple[DType, tuple]:
    from .state import Variable

    if isinstance(x, Tensor):
        return (x.dtype, x.shape)
    if isinstance(x, Variable):
        return (x.dtype, x.shape)
    raise KernelError(f"op inputs must be tensors or variables, got {type(x).__name__}")


def _dispatch_eager(
    op_def: OpDef, inputs: List, attrs: Dict[str, Any], ctx: ExecutionContext
) -> List[Tensor]:
    from .state import Variable

    for i, x in enumerate(inputs):
        if isinstance(x, Tensor):
            if x.is_symbolic:
                raise SymbolicTensor(
                    f"symbolic tensor passed to eager dispatch of {op_def.name!r}; "
                    "symbolic values are only usable inside their trace"
                )
        elif not isinstance(x, Variable):
            raise KernelError(
                f"{op_def.name}: input {i} is {type(x).__name__}, "
                "expected a tensor or variable"
            )
    device, moved = resolve_placement(op_def, inputs, ctx)
    env = _k.KernelEnv(device=device)
    try:
        outputs = op_def.kernel(attrs, moved, env)
    except StageflowError:
        raise
    except Exception as e:  # numpy and friends
        raise KernelError(f"{op_def.name}: {e}") from e
    rt = get_runtime()
    rt.stats.count_eager(op_def.name)
    if ctx.tapes:
        _notify_tapes(op_def, inputs, outputs, attrs, ctx)
    return outputs


def _notify_tapes(op_def, inputs, outputs, attrs, ctx) -> None:
    # Reading a variable watches it on every active tape, without an
    # explicit watch call.
    if op_def.name == "read_variable":
        var = inputs[0]
        if var.dtype.is_float:
            for t in ctx.tapes:
                if t.active:
                    t._auto_watch(var)
    if op_def.differentiable:
        for t in ctx.tapes:
            if t.active:
                t._maybe_record(op_def, inputs, outputs, attrs)


# ---------------------------------------------------------------------------
# Coercion and user-facing wrappers
# ---------------------------------------------------------------------------


def _as_operand(x, like: Optional[Tensor] = None):
    """Coerce a wrapper argument to a Tensor (variables read themselves)."""
    from .state import Variable

    if isinstance(x, Tensor):
        return x
    if isinstance(x, Variable):
        return x.read_value()
    if like is not None and isinstance(like, Tensor):
        arr = np.asarray(x, dtype=like.dtype.np_dtype)
        from .tensor import tensor_from_host

        return tensor_from_host(arr.reshape(-1), arr.shape, like.dtype)
    return _constant_tensor(x)


def _binary(op: str):
    def fn(a, b):
        from .state import Variable

        if isinstance(a, Variable):
            a = a.read_value()
        if isinstance(b, Variable):
            b = b.read_value()
        if not isinstance(a, Tensor):
            a = _as_operand(a, like=b if isinstance(b, Tensor) else None)
        if not isinstance(b, Tensor):
            b = _as_operand(b, like=a)
        return dispatch(op, [a, b])[0]

    fn.__name__ = op
    return fn


def _unary(op: str):
    def fn(x):
        return dispatch(op, [_as_operand(x)])[0]

    fn.__name__ = op
    return fn


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
div = _binary("div")
matmul = _binary("matmul")
greater = _binary("greater")
neg = _unary("neg")
exp = _unary("exp")
log = _unary("log")
softplus = _unary("softplus")
relu = _unary("relu")
identity = _unary("identity")


def reshape(x, shape) -> Tensor:
    return dispatch("reshape", [_as_operand(x)], {"shape": tuple(shape)})[0]


def broadcast_to(x, shape) -> Tensor:
    return dispatch("broadcast_to", [_as_operand(x)], {"shape": tuple(shape)})[0]


def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    return dispatch(
        "reduce_sum", [_as_operand(x)], {"axes": axes, "keepdims": keepdims}
    )[0]


def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    return dispatch(
        "reduce_mean", [_as_operand(x)], {"axes": axes, "keepdims": keepdims}
    )[0]


def eye(size: int, dtype: DType = float32) -> Tensor:
    return dispatch("eye", [], {"size": size, "dtype": dtype})[0]


def random_normal(shape, dtype: DType = float32) -> Tensor:
    return dispatch("random_normal", [], {"shape": tuple(shape), "dtype": dtype})[0]


def dropout(x, rate: float) -> Tensor:
    out, _mask = dispatch("dropout", [_as_operand(x)], {"rate": rate})
    return out


def _install_tensor_operators() -> None:
    def coerced(op):
        def method(self, other):
            return dispatch(op, [self, _as_operand(other, like=self)])[0]

        return method

    def r_coerced(op):
        def method(self, other):
            return dispatch(op, [_as_operand(other, like=self), self])[0]

        return method

    Tensor.__add__ = coerced("add")
    Tensor.__radd__ = r_coerced("add")
    Tensor.__sub__ = coerced("sub")
    Tensor.__rsub__ = r_coerced("sub")
    Tensor.__mul__ = coerced("mul")
    Tensor.__rmul__ = r_coerced("mul")
    Tensor.__truediv__ = coerced("div")
    Tensor.__rtruediv__ = r_coerced("div")
    Tensor.__matmul__ = coerced("matmul")
    Tensor.__gt__ = coerced("greater")
    Tensor.__neg__ = lambda self: dispatch("neg", [self])[0]


_install_tensor_operators()
