"""Per-op gradient rules.

Each rule maps upstream output gradients to input gradients and is written
entirely in terms of dispatched primitive ops. That single property gives
higher-order differentiation for free: when a rule runs while an outer tape
is active its ops are recorded like any others, and when it runs while a
trace is open its ops become nodes of the backward graph being built.

Rules receive a ``GradContext``: attrs plus lazy accessors for the saved
forward inputs/outputs and the upstream gradients. Accessors are lazy so the
staged-backward builder only exports forward intermediates a rule actually
touches.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional

import numpy as np

from .dtypes import DType
from .errors import StagingError
from .tensor import Tensor, tensor_from_host


class GradContext:
    """Accessors into one recorded op application."""

    def __init__(self, attrs, input_fn, output_fn, in_specs, out_specs, out_grads):
        self.attrs = attrs
        self._input_fn = input_fn
        self._output_fn = output_fn
        self._in_specs = in_specs
        self._out_specs = out_specs
        self._out_grads = out_grads

    def input(self, i: int) -> Tensor:
        return self._input_fn(i)

    def output(self, j: int) -> Tensor:
        return self._output_fn(j)

    def out_grad(self, j: int = 0) -> Optional[Tensor]:
        return self._out_grads[j]

    def in_spec(self, i: int):
        return self._in_specs[i]

    def out_spec(self, j: int):
        return self._out_specs[j]


def _static_shape(shape, what: str):
    if any(d is None for d in shape):
        raise StagingError(
            f"cannot build a gradient for {what} with unknown dims {list(shape)}; "
            "gradients of shape-polymorphic functions are not supported"
        )
    return tuple(shape)


def _scalar(value: float, dtype: DType) -> Tensor:
    return tensor_from_host([value], (), dtype)


def zeros_for(spec) -> Tensor:
    dtype, shape = spec
    shape = _static_shape(shape, "a zero gradient")
    arr = np.zeros(shape, dtype=dtype.np_dtype)
    return tensor_from_host(arr.reshape(-1), shape, dtype)


def ones_for(spec) -> Tensor:
    dtype, shape = spec
    shape = _static_shape(shape, "a gradient seed")
    arr = np.ones(shape, dtype=dtype.np_dtype)
    return tensor_from_host(arr.reshape(-1), shape, dtype)


def _unbroadcast(g: Tensor, target_shape) -> Tensor:
    """Sum a broadcast gradient back down to the operand's shape."""
    from .ops import reduce_sum, reshape

    target = _static_shape(target_shape, "an unbroadcast")
    gshape = _static_shape(g.shape, "an unbroadcast")
    if gshape == target:
        return g
    extra = len(gshape) - len(target)
    axes = list(range(extra))
    for i, d in enumerate(target):
        if d == 1 and gshape[extra + i] != 1:
            axes.append(extra + i)
    if axes:
        g = reduce_sum(g, axes=tuple(axes), keepdims=False)
    if g.shape != target:
        g = reshape(g, target)
    return g


# Individual rules. Return one entry per op input; None means no gradient
# flows to that input.


def _grad_identity(ctx) -> List[Optional[Tensor]]:
    return [ctx.out_grad()]


def _grad_add(ctx):
    up = ctx.out_grad()
    return [
        _unbroadcast(up, ctx.in_spec(0)[1]),
        _unbroadcast(up, ctx.in_spec(1)[1]),
    ]


def _grad_sub(ctx):
    from .ops import neg

    up = ctx.out_grad()
    return [
        _unbroadcast(up, ctx.in_spec(0)[1]),
        _unbroadcast(neg(up), ctx.in_spec(1)[1]),
    ]


def _grad_mul(ctx):
    from .ops import mul

    up = ctx.out_grad()
    return [
        _unbroadcast(mul(up, ctx.input(1)), ctx.in_spec(0)[1]),
        _unbroadcast(mul(up, ctx.input(0)), ctx.in_spec(1)[1]),
    ]


def _grad_div(ctx):
    from .ops import div, mul, neg

    up = ctx.out_grad()
    a, b = ctx.input(0), ctx.input(1)
    ga = _unbroadcast(div(up, b), ctx.in_spec(0)[1])
    gb = _unbroadcast(neg(div(mul(up, a), mul(b, b))), ctx.in_spec(1)[1])
    return [ga, gb]


def _grad_neg(ctx):
    from .ops import neg

    return [neg(ctx.out_grad())]


def _grad_exp(ctx):
    from .ops import mul

    return [mul(ctx.out_grad(), ctx.output(0))]


def _grad_log(ctx):
    from .ops import div

    return [div(ctx.out_grad(), ctx.input(0))]


def _grad_softplus(ctx):
    from .ops import add, div, exp, mul, neg

    x = ctx.input(0)
    one = _scalar(1.0, ctx.in_spec(0)[0])
    sigmoid = div(one, add(one, exp(neg(x))))
    return [mul(ctx.out_grad(), sigmoid)]


def _grad_relu(ctx):
    from .ops import dispatch, mul

    gate = dispatch("step_positive", [ctx.input(0)])[0]
    return [mul(ctx.out_grad(), gate)]


def _grad_matmul(ctx):
    from .ops import dispatch, matmul

    up = ctx.out_grad()
    a, b = ctx.input(0), ctx.input(1)
    ta = dispatch("transpose", [a])[0]
    tb = dispatch("transpose", [b])[0]
    return [matmul(up, tb), matmul(ta, up)]


def _grad_transpose(ctx):
    from .ops import dispatch

    return [dispatch("transpose", [ctx.out_grad()])[0]]


def _grad_reshape(ctx):
    from .ops import reshape

    shape = _static_shape(ctx.in_spec(0)[1], "a reshape gradient")
    return [reshape(ctx.out_grad(), shape)]


def _grad_broadcast_to(ctx):
    return [_unbroadcast(ctx.out_grad(), ctx.in_spec(0)[1])]


def _reduced_axes(shape, axes):
    rank = len(shape)
    if axes is None:
        return tuple(range(rank))
    return tuple(ax % rank for ax in axes)


def _grad_reduce_sum(ctx):
    from .ops import broadcast_to, reshape

    up = ctx.out_grad()
    in_shape = _static_shape(ctx.in_spec(0)[1], "a reduce_sum gradient")
    axes = _reduced_axes(in_shape, ctx.attrs.get("axes"))
    if not ctx.attrs.get("keepdims", False):
        mid_shape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
        up = reshape(up, mid_shape)
    return [broadcast_to(up, in_shape)]


def _grad_reduce_mean(ctx):
    from .ops import broadcast_to, mul, reshape

    up = ctx.out_grad()
    in_shape = _static_shape(ctx.in_spec(0)[1], "a reduce_mean gradient")
    axes = _reduced_axes(in_shape, ctx.attrs.get("axes"))
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    if not ctx.attrs.get("keepdims", False):
        mid_shape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
        up = reshape(up, mid_shape)
    scaled = mul(up, _scalar(1.0 / count, ctx.in_spec(0)[0]))
    return [broadcast_to(scaled, in_shape)]


def _grad_dropout(ctx):
    from .ops import mul

    up = ctx.out_grad(0)
    if up is None:
        return [None]
    return [mul(up, ctx.output(1))]  # output 1 is the scaled keep-mask


def _grad_read_variable(ctx):
    return [ctx.out_grad()]


GRADIENTS: Dict[str, Callable[[GradContext], List[Optional[Tensor]]]] = {
    "identity": _grad_identity,
    "add": _grad_add,
    "sub": _grad_sub,
    "mul": _grad_mul,
    "div": _grad_div,
    "neg": _grad_neg,
    "exp": _grad_exp,
    "log": _grad_log,
    "softplus": _grad_softplus,
    "relu": _grad_relu,
    "matmul": _grad_matmul,
    "transpose": _grad_transpose,
    "reshape": _grad_reshape,
    "broadcast_to": _grad_broadcast_to,
    "reduce_sum": _grad_reduce_sum,
    "reduce_mean": _grad_reduce_mean,
    "dropout": _grad_dropout,
    "read_variable": _grad_read_variable,
}
