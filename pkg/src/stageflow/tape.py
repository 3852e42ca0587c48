"""Gradient tapes: trace-based reverse-mode differentiation.

A tape records every differentiable op whose inputs it is watching (directly
or transitively) while it is active. Tapes nest strictly: an inner tape's
gradient computation dispatches ordinary ops, so a still-active outer tape
records the backward math too, which is all that higher-order derivatives
require.

Values are tracked by host object identity. Entries keep strong references
to the tensors they saved, so identities stay stable for the tape's
lifetime.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .errors import (
    ConsumedTape,
    InactiveTape,
    NonNestedEnd,
    NonScalarTarget,
    UnwatchedSource,
)
from .gradients import GradContext, ones_for, zeros_for
from .runtime import current_context
from .tensor import Tensor


class TapeEntry:
    """One recorded op application.

    ``saved_inputs``/``saved_outputs`` hold everything the op's gradient
    might need, so the backward pass never re-runs the forward op.
    ``backward`` maps upstream output gradients to a list of
    ``(input identity, gradient)`` contributions.
    """

    __slots__ = ("op", "input_ids", "output_ids", "saved_inputs", "saved_outputs",
                 "backward")

    def __init__(self, op, input_ids, output_ids, saved_inputs, saved_outputs,
                 backward):
        self.op = op
        self.input_ids = input_ids
        self.output_ids = output_ids
        self.saved_inputs = saved_inputs
        self.saved_outputs = saved_outputs
        self.backward = backward


def _spec_of(value) -> Tuple:
    return (value.dtype, value.shape)


class Tape:
    """Records watched computations; nestable; one gradient call unless
    constructed persistent."""

    def __init__(self, persistent: bool = False):
        self.persistent = persistent
        self.active = False
        self._consumed = False
        self.entries: List[TapeEntry] = []
        self._watched: set = set()
        self._tracked: set = set()
        self._refs: list = []  # keeps watched/saved objects alive

    # -- lifecycle -----------------------------------------------------------

    def begin(self) -> "Tape":
        ctx = current_context()
        if self.active:
            raise InactiveTape("tape is already active")
        ctx.tapes.append(self)
        self.active = True
        return self

    def end(self) -> None:
        ctx = current_context()
        if not ctx.tapes or ctx.tapes[-1] is not self:
            raise NonNestedEnd(
                "tapes must end innermost-first; this tape is not the "
                "innermost active tape"
            )
        ctx.tapes.pop()
        self.active = False

    def __enter__(self) -> "Tape":
        return self.begin()

    def __exit__(self, exc_type, exc, tb) -> None:
        if self.active:
            self.end()

    # -- watching and recording ------------------------------------------------

    def watch(self, value) -> None:
        if not self.active:
            raise InactiveTape("cannot watch on an inactive tape")
        self._watched.add(id(value))
        self._tracked.add(id(value))
        self._refs.append(value)

    def _auto_watch(self, variable) -> None:
        # Reading a variable counts as watching it; no explicit call needed.
        self._watched.add(id(variable))
        self._tracked.add(id(variable))
        self._refs.append(variable)

    def watches(self, value) -> bool:
        return id(value) in self._watched

    def _maybe_record(self, op_def, inputs, outputs, attrs) -> None:
        if not any(id(x) in self._tracked for x in inputs):
            return
        saved_in = tuple(inputs)
        saved_out = tuple(outputs)
        in_specs = [_spec_of(x) for x in inputs]
        out_specs = [_spec_of(x) for x in outputs]
        input_ids = tuple(id(x) for x in inputs)

        def backward(out_grads):
            ctx = GradContext(
                attrs,
                input_fn=lambda i: saved_in[i],
                output_fn=lambda j: saved_out[j],
                in_specs=in_specs,
                out_specs=out_specs,
                out_grads=out_grads,
            )
            grads = op_def.gradient(ctx)
            return [
                (input_ids[i], g) for i, g in enumerate(grads) if g is not None
            ]

        self._record(op_def.name, input_ids, outputs, saved_in, saved_out, backward)

    def _record_custom(self, op, inputs, outputs, saved, backward) -> None:
        """Record a function-call entry with a prebuilt backward closure."""
        self._record(op, tuple(id(x) for x in inputs), outputs, tuple(saved),
                     tuple(outputs), backward)

    def _record(self, op, input_ids, outputs, saved_in, saved_out, backward):
        entry = TapeEntry(
            op=op,
            input_ids=input_ids,
            output_ids=tuple(id(y) for y in outputs),
            saved_inputs=saved_in,
            saved_outputs=saved_out,
            backward=backward,
        )
        self.entries.append(entry)
        self._tracked.update(entry.output_ids)

    # -- differentiation ---------------------------------------------------------

    def gradient(
        self,
        target: Tensor,
        sources: Union[Sequence, object],
    ) -> Union[List[Tensor], Tensor]:
        """d(target)/d(source) for each source, by reverse accumulation.

        Unconnected sources get zero tensors of their own shape. A
        non-persistent tape supports exactly one gradient call.
        """
        single = not isinstance(sources, (list, tuple))
        source_list = [sources] if single else list(sources)
        if self._consumed:
            raise ConsumedTape(
                "this tape's gradient was already computed; construct it with "
                "persistent=True to reuse it"
            )
        if not isinstance(target, Tensor):
            raise NonScalarTarget("gradient target must be a tensor")
        if any(d is None for d in target.shape) or _count(target.shape) != 1:
            raise NonScalarTarget(
                f"gradient target must be a scalar, got shape {list(target.shape)}"
            )
        for s in source_list:
            if id(s) not in self._watched:
                raise UnwatchedSource(
                    "every gradient source must be watched by this tape"
                )
            if not s.dtype.is_float:
                raise UnwatchedSource(
                    f"cannot differentiate with respect to a {s.dtype.value} "
                    "value; only float sources are supported"
                )
        if not self.persistent:
            self._consumed = True

        seeds = {id(target): ones_for(_spec_of(target))}
        grads = self._accumulate(seeds)
        results = [
            grads.get(id(s), None) or zeros_for(_spec_of(s)) for s in source_list
        ]
        return results[0] if single else results

    def _accumulate(self, seeds: Dict[int, Tensor]) -> Dict[int, Tensor]:
        from .ops import add

        grads = dict(seeds)
        for entry in reversed(self.entries):
            if not any(oid in grads for oid in entry.output_ids):
                continue
            out_grads = [grads.get(oid) for oid in entry.output_ids]
            for key, g in entry.backward(out_grads):
                prev = grads.get(key)
                grads[key] = g if prev is None else add(prev, g)
        return grads

    def vjp(
        self, outputs: Sequence[Tensor], cotangents: Sequence[Tensor],
        sources: Sequence,
    ) -> List[Tensor]:
        """Vector-Jacobian product with explicit output cotangents.

        Internal generalization of ``gradient`` used by host-callback
        differentiation; subject to the same consumed-tape rule.
        """
        if self._consumed:
            raise ConsumedTape("tape already consumed")
        if not self.persistent:
            self._consumed = True
        from .ops import add

        seeds: Dict[int, Tensor] = {}
        for y, ct in zip(outputs, cotangents):
            if ct is None:
                continue
            prev = seeds.get(id(y))
            seeds[id(y)] = ct if prev is None else add(prev, ct)
        grads = self._accumulate(seeds)
        return [grads.get(id(s)) or zeros_for(_spec_of(s)) for s in sources]


def _count(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n
