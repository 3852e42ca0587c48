"""Staging: trace host functions into cached graph functions.

``stage`` wraps a host callable in a PolymorphicFunction. Each call infers a
trace key from the arguments (tensors abstracted to dtype/shape, variables
keyed by identity, plain values by value, plus the ambient device scope); a
cache miss runs the function once in a graph-building context and caches the
optimized graph, a hit reuses it. Graph functions execute through the
``call_function`` op, so calls place like ops and record onto tapes.

Host values the function closes over are captured: external tensors and
variables become hidden placeholder inputs passed automatically at call
time (variables by reference, so staged writes hit live storage). Host
values *created during* the trace freeze into the graph as constants.

State creation follows the double-trace contract: a function may create
variables only on its first trace; if it does, it is traced again and the
second trace (which must create none) becomes the cached behavior.
"""
from __future__ import annotations

import inspect
import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .devices import DeviceName
from .dtypes import DType
from .errors import (
    DeadVariable,
    KernelError,
    MissingConcreteFunction,
    SignatureMismatch,
    StageflowError,
    StagingError,
    SymbolicTensor,
    UnencodableArgument,
    VariableCreationError,
)
from .graph import FUNCTION_ATTRS, GraphBuilder, GraphFunction, optimize
from .kernels import KernelEnv
from .ops import FUNCTION, dispatch, get_op_def, input_spec, _as_operand
from .runtime import current_context, get_runtime
from .state import Variable
from .tensor import SymbolicRef, Tensor

_trace_ids = itertools.count(1)


class TraceState:
    """One open trace: the graph under construction plus capture state."""

    def __init__(self, name: str):
        self.trace_id = next(_trace_ids)
        self.name = name
        self.builder = GraphBuilder()
        self.library: Dict[str, GraphFunction] = {}
        self.created_variables: List[Variable] = []
        self.capture_values: List[Any] = []  # placeholder order
        self._capture_refs: Dict[int, Any] = {}
        self._pre_bound: Dict[int, Any] = {}  # explicit variable args
        self._const_cache: Dict[int, Any] = {}
        self._keepalive: List[Any] = []
        self._base_scope_depth = 0
        self._lib_names: Dict[int, str] = {}

    @contextmanager
    def open(self):
        ctx = current_context()
        ctx.traces.append(self)
        # Tapes follow execution, not tracing: outer tapes must not see the
        # symbolic ops recorded here (they see the staged call instead), so
        # the tape stack is suspended for the duration of the trace.
        saved_tapes = ctx.tapes
        ctx.tapes = []
        self._base_scope_depth = len(ctx.device_scopes)
        try:
            yield self
        finally:
            ctx.tapes = saved_tapes
            popped = ctx.traces.pop()
            assert popped is self

    # -- inputs -----------------------------------------------------------------

    def add_arg_tensor(self, name: str, dtype: DType, shape) -> Tensor:
        bref = self.builder.add_placeholder(name, dtype, tuple(shape))
        return self._symbolic(dtype, tuple(shape), bref)

    def add_arg_variable(self, name: str, v: Variable) -> None:
        bref = self.builder.add_placeholder(
            name, v.dtype, v.shape, is_variable_ref=True
        )
        self._pre_bound[id(v)] = bref
        self._keepalive.append(v)

    def _symbolic(self, dtype, shape, bref) -> Tensor:
        device = self._ambient_device()
        return Tensor(
            dtype, shape, device, symbolic=SymbolicRef(self.trace_id, bref)
        )

    def _ambient_device(self) -> DeviceName:
        ctx = current_context()
        return ctx.scope_device() or get_runtime().devices[0].name

    def _device_override(self) -> Optional[DeviceName]:
        # Only scopes entered inside the traced function pin nodes.
        ctx = current_context()
        if len(ctx.device_scopes) > self._base_scope_depth:
            return ctx.device_scopes[-1]
        return None

    # -- value resolution ----------------------------------------------------------

    def resolve_input(self, x):
        if isinstance(x, Tensor):
            if x.is_symbolic:
                sref = x.symbolic_ref
                if sref.trace_id == self.trace_id:
                    return sref.ref
                ctx = current_context()
                if not any(t.trace_id == sref.trace_id for t in ctx.traces):
                    raise StagingError(
                        "symbolic tensor from a closed trace cannot be used; "
                        "symbolic values are only valid inside the trace that "
                        "created them"
                    )
                return self._capture(x, is_variable=False)
            if x._born_trace == self.trace_id:
                return self._embed_constant(x)
            return self._capture(x, is_variable=False)
        if isinstance(x, Variable):
            pre = self._pre_bound.get(id(x))
            if pre is not None:
                return pre
            return self._capture(x, is_variable=True)
        raise KernelError(
            f"op inputs must be tensors or variables, got {type(x).__name__}"
        )

    def _capture(self, x, is_variable: bool):
        key = id(x)
        bref = self._capture_refs.get(key)
        if bref is None:
            idx = len(self.capture_values)
            bref = self.builder.add_placeholder(
                f"capture_{idx}", x.dtype, x.shape, is_variable_ref=is_variable
            )
            self._capture_refs[key] = bref
            self.capture_values.append(x)
            self._keepalive.append(x)
        return bref

    def _embed_constant(self, t: Tensor):
        key = id(t)
        bref = self._const_cache.get(key)
        if bref is None:
            refs = self.builder.add_node(
                "constant", [], {"value": t}, None, [(t.dtype, t.shape)]
            )
            bref = refs[0]
            self._const_cache[key] = bref
            self._keepalive.append(t)
        return bref

    def add_library_function(self, gf: GraphFunction) -> str:
        key = id(gf)
        name = self._lib_names.get(key)
        if name is not None:
            return name
        name = gf.name
        if name in self.library and self.library[name] is not gf:
            i = 1
            while f"{name}_v{i}" in self.library:
                i += 1
            name = f"{name}_v{i}"
        self.library[name] = gf
        self._lib_names[key] = name
        return name

    # -- node recording ----------------------------------------------------------

    def record(self, op_def, inputs: List, attrs: Dict[str, Any]) -> List[Tensor]:
        norm_attrs = dict(attrs)
        for attr_name in FUNCTION_ATTRS.get(op_def.name, ()):
            v = norm_attrs.get(attr_name)
            if isinstance(v, GraphFunction):
                norm_attrs[attr_name] = self.add_library_function(v)
        brefs = [self.resolve_input(x) for x in inputs]
        in_specs = [input_spec(x) for x in inputs]
        env = KernelEnv(device=self._ambient_device(), libraries=(self.library,))
        out_specs = op_def.infer(norm_attrs, in_specs, env)
        out_brefs = self.builder.add_node(
            op_def.name, brefs, norm_attrs, self._device_override(), out_specs
        )
        outs = [
            self._symbolic(dt, shape, bref)
            for (dt, shape), bref in zip(out_specs, out_brefs)
        ]
        ctx = current_context()
        if ctx.tapes:
            from .ops import _notify_tapes

            _notify_tapes(op_def, inputs, outs, norm_attrs, ctx)
        return outs

    def finalize(self, output_refs, output_names) -> GraphFunction:
        gf = self.builder.finalize(
            self.name, output_refs, output_names, library=self.library
        )
        return optimize(gf)


# ---------------------------------------------------------------------------
# Trace keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceKey:
    encoding: Tuple

    def __repr__(self) -> str:
        return f"TraceKey{self.encoding!r}"


_PINNED = TraceKey(("__pinned__",))


def _encode_value(v):
    if isinstance(v, Tensor):
        return ("tensor", v.dtype.value, v.shape)
    if isinstance(v, Variable):
        return ("variable", v.dtype.value, v.shape, id(v))
    if isinstance(v, bool):
        return ("bool", v)
    if v is None or isinstance(v, (int, float, str)):
        return ("value", type(v).__name__, v)
    if isinstance(v, (list, tuple)):
        return ("seq", type(v).__name__, tuple(_encode_value(e) for e in v))
    if isinstance(v, dict):
        try:
            items = sorted(v.items())
        except TypeError:
            raise UnencodableArgument(
                "dict arguments must have sortable keys"
            ) from None
        return ("map", tuple((k, _encode_value(e)) for k, e in items))
    raise UnencodableArgument(
        f"cannot build a trace key from a {type(v).__name__} argument; pass "
        "tensors, variables, or plain host values"
    )


def infer_trace_key(args: Sequence, ctx=None) -> TraceKey:
    """Deterministic, payload-independent key over arguments + device scope."""
    ctx = ctx or current_context()
    dev = ctx.scope_device()
    return TraceKey(
        (tuple(_encode_value(a) for a in args), dev.render() if dev else None)
    )


# ---------------------------------------------------------------------------
# Concrete and polymorphic functions
# ---------------------------------------------------------------------------


def _normalize_outputs(result, fn_name: str):
    if result is None:
        return [], "none"
    if isinstance(result, Tensor):
        return [result], "single"
    if isinstance(result, (tuple, list)):
        for r in result:
            if not isinstance(r, Tensor):
                raise StagingError(
                    f"{fn_name} returned a {type(r).__name__}; staged functions "
                    "must return tensors (or tuples/lists of tensors)"
                )
        return list(result), type(result).__name__
    raise StagingError(
        f"{fn_name} returned a {type(result).__name__}; staged functions must "
        "return tensors (or tuples/lists of tensors, or None)"
    )


class ConcreteFunction:
    """A traced graph plus its captured environment and output structure."""

    def __init__(self, graph: GraphFunction, captured: Sequence, structure: str):
        self.graph = graph
        self.structure = structure
        self._captured = []
        for value in captured:
            if isinstance(value, Variable):
                self._captured.append(("variable", weakref.ref(value), repr(value)))
            else:
                self._captured.append(("tensor", value, None))
        n_args = len(graph.inputs) - len(captured)
        self._read_var_positions = self._find_read_positions()

    def _find_read_positions(self) -> Tuple[int, ...]:
        n_in = len(self.graph.inputs)
        positions = set()
        for node in self.graph.nodes:
            if node.op in ("read_variable", "assign_variable", "assign_add_variable"):
                vid, _ = node.inputs[0]
                if vid < n_in and node.op == "read_variable":
                    positions.add(vid)
        return tuple(sorted(positions))

    @property
    def name(self) -> str:
        return self.graph.name

    @property
    def inputs(self):
        return self.graph.inputs

    @property
    def outputs(self):
        return self.graph.outputs

    def materialize_captured(self) -> List:
        values = []
        for kind, payload, desc in self._captured:
            if kind == "variable":
                v = payload()
                if v is None:
                    raise DeadVariable(
                        f"staged function {self.graph.name!r} references "
                        f"{desc}, whose host object no longer exists"
                    )
                values.append(v)
            else:
                values.append(payload)
        return values

    def unpack(self, outputs: List[Tensor]):
        if self.structure == "none":
            return None
        if self.structure == "single":
            return outputs[0]
        if self.structure == "tuple":
            return tuple(outputs)
        return list(outputs)


def call_concrete(cf: ConcreteFunction, explicit: Sequence) -> List[Tensor]:
    """Invoke a concrete function through the call_function op.

    When an active tape watches one of the inputs (captured variables that
    the graph reads auto-watch first), the call runs through the derived
    forward variant so the intermediates the backward pass needs come back
    with the outputs, and the tape entry's backward is itself a staged
    function call.
    """
    inputs_all = list(explicit) + cf.materialize_captured()
    ctx = current_context()
    active_tapes = [t for t in ctx.tapes if t.active]
    watching = []
    if active_tapes:
        for pos in cf._read_var_positions:
            v = inputs_all[pos]
            if isinstance(v, Variable) and v.dtype.is_float:
                for t in active_tapes:
                    t._auto_watch(v)
        watching = [
            t
            for t in active_tapes
            if any(id(x) in t._tracked for x in inputs_all)
        ]
    differentiable = any(dt.is_float for dt, _ in cf.graph.output_specs)
    if watching and differentiable:
        return _call_with_tape(cf, inputs_all, watching)
    return dispatch("call_function", inputs_all, {"function": cf.graph})


def _call_with_tape(cf, inputs_all, watching) -> List[Tensor]:
    from .backprop import get_forward_backward
    from .gradients import zeros_for

    fwd, bwd_cf, saved_desc, float_pos = get_forward_backward(cf.graph)
    outs_all = dispatch("call_function", inputs_all, {"function": fwd})
    m = len(cf.graph.outputs)
    outs, extras = outs_all[:m], outs_all[m:]
    saved_vals = [
        inputs_all[d[1]] if d[0] == "input" else extras[d[1]] for d in saved_desc
    ]
    out_specs = cf.graph.output_specs
    input_ids = [id(x) for x in inputs_all]

    def backward(out_grads):
        seeds = [
            g if g is not None else zeros_for(spec)
            for g, spec in zip(out_grads, out_specs)
        ]
        grads = call_concrete(bwd_cf, seeds + list(saved_vals))
        return [(input_ids[p], g) for p, g in zip(float_pos, grads)]

    for t in watching:
        t._record_custom("call_function", inputs_all, outs, saved_vals, backward)
    return outs


class PolymorphicFunction:
    """The callable returned by ``stage``."""

    def __init__(self, fn, signature=None, name: Optional[str] = None):
        self._fn = fn
        base = name or getattr(fn, "__name__", "staged_fn")
        self._name = "staged_lambda" if base == "<lambda>" else base
        try:
            self._sig = inspect.signature(fn)
        except (TypeError, ValueError):
            self._sig = None
        self.pinned_signature = _check_signature(signature)
        self._cache: Dict[TraceKey, ConcreteFunction] = {}
        self._cache_lock = threading.Lock()
        self._key_locks: Dict[TraceKey, threading.Lock] = {}
        self.variables_created: "weakref.WeakSet[Variable]" = weakref.WeakSet()
        self._traced_once = False
        self.trace_count = 0

    # -- public surface ---------------------------------------------------------

    @property
    def cache_size(self) -> int:
        return len(self._cache)

    def cached_functions(self) -> List[ConcreteFunction]:
        return list(self._cache.values())

    def trace_key_for(self, *args, **kwargs) -> TraceKey:
        bound = self._bind(args, kwargs)
        if self.pinned_signature is not None:
            self._check_pinned(bound)
            return _PINNED
        return infer_trace_key([v for _, v, _ in bound])

    def get_concrete(self, key: TraceKey) -> ConcreteFunction:
        cf = self._cache.get(key)
        if cf is None:
            raise MissingConcreteFunction(
                f"{self._name} has no cached graph function for {key!r}"
            )
        return cf

    def __call__(self, *args, **kwargs):
        bound = self._bind(args, kwargs)
        cf = self._concrete_for(bound)
        explicit = [
            v for _, v, _ in bound if isinstance(v, (Tensor, Variable))
        ]
        outs = call_concrete(cf, explicit)
        return cf.unpack(outs)

    # -- internals -------------------------------------------------------------

    def _bind(self, args, kwargs) -> List[Tuple[str, object, str]]:
        """Flatten a call into ordered (name, value, kind) entries.

        Variadic parameters expand one entry per element, so every tensor
        argument gets its own placeholder and trace-key slot.
        """
        if self._sig is None:
            if kwargs:
                raise StagingError(f"{self._name} does not accept keyword arguments")
            return [(f"arg_{i}", v, "pos") for i, v in enumerate(args)]
        try:
            ba = self._sig.bind(*args, **kwargs)
        except TypeError as e:
            raise StagingError(f"{self._name}: {e}") from e
        ba.apply_defaults()
        entries: List[Tuple[str, object, str]] = []
        for name, param in self._sig.parameters.items():
            if name not in ba.arguments:
                continue
            value = ba.arguments[name]
            if param.kind is inspect.Parameter.VAR_POSITIONAL:
                entries.extend(
                    (f"{name}_{i}", v, "pos") for i, v in enumerate(value)
                )
            elif param.kind is inspect.Parameter.VAR_KEYWORD:
                entries.extend((k, value[k], "kw") for k in sorted(value))
            elif param.kind is inspect.Parameter.KEYWORD_ONLY:
                entries.append((name, value, "kw"))
            else:
                entries.append((name, value, "pos"))
        return entries

    @staticmethod
    def _rebuild_call(bound, substitutes):
        args, kwargs = [], {}
        for (name, _, kind), sub in zip(bound, substitutes):
            if kind == "pos":
                args.append(sub)
            else:
                kwargs[name] = sub
        return args, kwargs

    def _check_pinned(self, bound: List) -> None:
        sig = self.pinned_signature
        if len(bound) != len(sig):
            raise SignatureMismatch(
                f"{self._name} is pinned to {len(sig)} arguments, got {len(bound)}"
            )
        for i, ((_, arg, _), (dtype, shape)) in enumerate(zip(bound, sig)):
            if not isinstance(arg, Tensor):
                raise SignatureMismatch(
                    f"{self._name}: argument {i} must be a tensor under a "
                    "pinned signature"
                )
            if arg.dtype is not dtype or len(arg.shape) != len(shape):
                raise SignatureMismatch(
                    f"{self._name}: argument {i} is {arg.dtype.value} rank "
                    f"{len(arg.shape)}, pinned to {dtype.value} rank {len(shape)}"
                )
            for have, want in zip(arg.shape, shape):
                if want is not None and have != want:
                    raise SignatureMismatch(
                        f"{self._name}: argument {i} shape {list(arg.shape)} "
                        f"violates pinned shape {list(shape)}"
                    )

    def _concrete_for(self, bound: List) -> ConcreteFunction:
        if self.pinned_signature is not None:
            self._check_pinned(bound)
            key = _PINNED
        else:
            key = infer_trace_key([v for _, v, _ in bound])
        cf = self._cache.get(key)
        if cf is not None:
            return cf
        with self._cache_lock:
            cf = self._cache.get(key)
            if cf is not None:
                return cf
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            with self._cache_lock:
                cf = self._cache.get(key)
            if cf is not None:
                return cf
            cf = self._trace_to_concrete(bound)
            with self._cache_lock:
                self._cache[key] = cf
            return cf

    def _trace_to_concrete(self, bound: List) -> ConcreteFunction:
        ts, gf, structure = self._run_trace(bound)
        if ts.created_variables:
            if self._traced_once:
                raise VariableCreationError(
                    f"{self._name} created variables on a later trace; state "
                    "must only be created the first time a staged function runs"
                )
            for v in ts.created_variables:
                self.variables_created.add(v)
            ts, gf, structure = self._run_trace(bound)
            if ts.created_variables:
                raise VariableCreationError(
                    f"{self._name} creates variables every time it runs; it "
                    "must create state on the first call only"
                )
        self._traced_once = True
        return ConcreteFunction(gf, ts.capture_values, structure)

    def _run_trace(self, bound: List):
        get_runtime().stats.count_trace()
        self.trace_count += 1
        ts = TraceState(self._name)
        substitutes = []
        for i, (pname, value, _) in enumerate(bound):
            if self.pinned_signature is not None:
                dtype, shape = self.pinned_signature[i]
                substitutes.append(ts.add_arg_tensor(pname, dtype, shape))
            elif isinstance(value, Tensor):
                substitutes.append(ts.add_arg_tensor(pname, value.dtype, value.shape))
            elif isinstance(value, Variable):
                ts.add_arg_variable(pname, value)
                substitutes.append(value)
            else:
                substitutes.append(value)
        call_args, call_kwargs = self._rebuild_call(bound, substitutes)
        with ts.open():
            try:
                result = self._fn(*call_args, **call_kwargs)
            except (VariableCreationError, StagingError):
                raise
            except SymbolicTensor as e:
                raise StagingError(
                    f"{self._name} used a concrete-only facility on a symbolic "
                    f"tensor while being traced: {e}"
                ) from e
            except StageflowError:
                raise
            except Exception as e:
                raise StagingError(
                    f"{self._name} raised while being traced: "
                    f"{type(e).__name__}: {e}"
                ) from e
            out_tensors, structure = _normalize_outputs(result, self._name)
            out_refs = [ts.resolve_input(t) for t in out_tensors]
        gf = ts.finalize(out_refs, [f"out_{i}" for i in range(len(out_refs))])
        return ts, gf, structure


def _check_signature(signature):
    if signature is None:
        return None
    checked = []
    for entry in signature:
        dtype, shape = entry
        if not isinstance(dtype, DType):
            raise SignatureMismatch(f"signature dtypes must be DType, got {dtype!r}")
        checked.append(
            (dtype, tuple(None if d is None else int(d) for d in shape))
        )
    return checked


def stage(fn=None, *, signature=None, name=None):
    """Decorator form of PolymorphicFunction construction."""
    if fn is None:
        return lambda f: PolymorphicFunction(f, signature=signature, name=name)
    return PolymorphicFunction(fn, signature=signature, name=name)


# ---------------------------------------------------------------------------
# Tensor-dependent control flow
# ---------------------------------------------------------------------------

_branch_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _trace_callable(fn, arg_specs, name: str) -> Tuple[ConcreteFunction, str]:
    try:
        per_fn = _branch_cache.setdefault(fn, {})
    except TypeError:  # unhashable callables trace fresh every time
        per_fn = {}
    cache_key = tuple(arg_specs)
    hit = per_fn.get(cache_key)
    if hit is not None:
        return hit
    get_runtime().stats.count_trace()
    ts = TraceState(name)
    syms = [
        ts.add_arg_tensor(f"arg_{i}", dt, shape)
        for i, (dt, shape) in enumerate(arg_specs)
    ]
    with ts.open():
        try:
            result = fn(*syms)
        except StageflowError:
            raise
        except Exception as e:
            raise StagingError(
                f"{name} raised while being traced: {type(e).__name__}: {e}"
            ) from e
        out_tensors, structure = _normalize_outputs(result, name)
        out_refs = [ts.resolve_input(t) for t in out_tensors]
    gf = ts.finalize(out_refs, [f"out_{i}" for i in range(len(out_refs))])
    cf = ConcreteFunction(gf, ts.capture_values, structure)
    per_fn[cache_key] = (cf, structure)
    return cf, structure


def cond(pred, true_fn, false_fn, operands: Sequence = ()):
    """Tensor-dependent branch, staged natively in both modes."""
    pred = _as_operand(pred)
    ops = [_as_operand(x) for x in operands]
    specs = [input_spec(x) for x in ops]
    then_cf, t_struct = _trace_callable(true_fn, specs, _fn_name(true_fn, "cond_true"))
    else_cf, e_struct = _trace_callable(false_fn, specs, _fn_name(false_fn, "cond_false"))
    t_specs = then_cf.graph.output_specs
    e_specs = else_cf.graph.output_specs
    if [s[0] for s in t_specs] != [s[0] for s in e_specs] or t_struct != e_struct:
        raise StagingError("cond branches must produce matching outputs")
    then_caps = then_cf.materialize_captured()
    else_caps = else_cf.materialize_captured()
    outs = dispatch(
        "cond",
        [pred] + ops + then_caps + else_caps,
        {
            "then_branch": then_cf.graph,
            "else_branch": else_cf.graph,
            "n_operands": len(ops),
            "n_then_captured": len(then_caps),
            "n_else_captured": len(else_caps),
        },
    )
    return then_cf.unpack(outs)


def while_loop(cond_fn, body_fn, loop_vars: Sequence):
    """Tensor-dependent loop; loop variables keep their dtype and shape."""
    vars_ = [_as_operand(x) for x in loop_vars]
    specs = [input_spec(x) for x in vars_]
    cond_cf, _ = _trace_callable(cond_fn, specs, _fn_name(cond_fn, "loop_cond"))
    body_cf, b_struct = _trace_callable(body_fn, specs, _fn_name(body_fn, "loop_body"))
    body_specs = body_cf.graph.output_specs
    if len(body_specs) != len(specs) or any(
        bs[0] is not s[0] for bs, s in zip(body_specs, specs)
    ):
        raise StagingError(
            "while_loop body must return one value per loop variable, with "
            "matching dtypes"
        )
    cond_caps = cond_cf.materialize_captured()
    body_caps = body_cf.materialize_captured()
    outs = dispatch(
        "while_loop",
        vars_ + cond_caps + body_caps,
        {
            "loop_cond": cond_cf.graph,
            "loop_body": body_cf.graph,
            "n_vars": len(vars_),
            "n_cond_captured": len(cond_caps),
            "n_body_captured": len(body_caps),
        },
    )
    return tuple(outs) if len(outs) != 1 else outs[0]


def _fn_name(fn, fallback: str) -> str:
    name = getattr(fn, "__name__", fallback)
    return fallback if name == "<lambda>" else name
