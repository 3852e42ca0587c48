"""Differentiation of graph functions.

The first time a graph function is called while a tape watches one of its
inputs, two derived functions are built from it and cached:

* a *forward variant*: the same graph, with every intermediate value the
  backward pass needs appended as an extra named output (nested function
  calls on the gradient path are rewritten to call the callee's own forward
  variant, so intermediates thread out through call boundaries);
* a *backward function*: a fresh graph that maps
  ``(output gradients..., saved values...)`` to gradients for every float
  input, built by running the per-op gradient rules in reverse over the
  forward graph inside a new trace.

The tape entry for the call stores the saved values, so computing the
gradient of a staged forward pass executes the staged backward function —
no eager math runs in the backward pass of a staged computation.
"""
from __future__ import annotations

from typing import Dict, List, Tuple

from .errors import StagingError
from .gradients import GradContext, zeros_for
from .graph import GraphFunction, Node
from .ops import dispatch, get_op_def
from .runtime import get_runtime

SavedDesc = Tuple  # ("input", placeholder index) | ("extra", fwd extra index)


def get_forward_backward(gf: GraphFunction):
    cached = getattr(gf, "_fwd_bwd", None)
    if cached is None:
        cached = _build(gf)
        gf._fwd_bwd = cached
    return cached


def _build(gf: GraphFunction):
    from .ops import add
    from .staging import ConcreteFunction, TraceState, call_concrete

    rt = get_runtime()
    n_in = len(gf.inputs)
    ts = TraceState(gf.name + "_bwd")

    needed: List[Tuple[int, int]] = []  # forward refs exported by the variant
    needed_index: Dict[Tuple[int, int], int] = {}
    aug_specs: Dict[Tuple[int, int], Tuple] = {}  # extra outputs of rewritten calls
    call_rewrites: Dict[int, GraphFunction] = {}
    saved_desc: List[SavedDesc] = []
    saved_syms: Dict[Tuple[int, int], object] = {}
    grads: Dict[Tuple[int, int], object] = {}

    def spec_of(ref):
        return aug_specs.get(ref) or gf.spec_of(ref)

    def accumulate(ref, g):
        prev = grads.get(ref)
        grads[ref] = g if prev is None else add(prev, g)

    with ts.open():
        # Backward inputs, part 1: one upstream-gradient placeholder per
        # forward output.
        for name, ref in gf.outputs:
            dt, shape = gf.spec_of(ref)
            if any(d is None for d in shape):
                raise StagingError(
                    f"cannot differentiate {gf.name}: output {name!r} has "
                    "unknown dims (shape-polymorphic functions are not "
                    "differentiable)"
                )
            accumulate(ref, ts.add_arg_tensor(f"grad_{name}", dt, shape))

        # Backward inputs, part 2 (lazily): saved forward values.
        def saved_value(ref):
            sym = saved_syms.get(ref)
            if sym is None:
                dt, shape = spec_of(ref)
                sym = ts.add_arg_tensor(f"saved_{len(saved_desc)}", dt, shape)
                vid, out_idx = ref
                if vid < n_in:
                    saved_desc.append(("input", vid))
                else:
                    pos = needed_index.get(ref)
                    if pos is None:
                        pos = len(needed)
                        needed.append(ref)
                        needed_index[ref] = pos
                    saved_desc.append(("extra", pos))
                saved_syms[ref] = sym
            return sym

        for i in range(len(gf.nodes) - 1, -1, -1):
            node = gf.nodes[i]
            vid = n_in + i
            out_grads = [grads.get((vid, j)) for j in range(len(node.out_specs))]
            if all(g is None for g in out_grads):
                continue
            if node.op == "call_function":
                _diff_call_node(
                    gf, node, vid, out_grads, saved_value, accumulate,
                    call_rewrites, aug_specs, i, call_concrete,
                )
            elif node.op == "host_call":
                _diff_host_call(gf, node, out_grads, saved_value, accumulate)
            else:
                op_def = get_op_def(node.op)
                if op_def.gradient is None:
                    continue  # non-differentiable; contributes nothing
                in_specs = [gf.spec_of(r) for r in node.inputs]
                gctx = GradContext(
                    node.attrs,
                    input_fn=lambda k, _n=node: saved_value(_n.inputs[k]),
                    output_fn=lambda k, _v=vid: saved_value((_v, k)),
                    in_specs=in_specs,
                    out_specs=list(node.out_specs),
                    out_grads=out_grads,
                )
                for ref, g in zip(node.inputs, op_def.gradient(gctx)):
                    if g is not None:
                        accumulate(ref, g)

        float_pos = [
            p for p, ph in enumerate(gf.inputs) if ph.dtype.is_float
        ]
        out_refs, out_names = [], []
        for p in float_pos:
            ph = gf.inputs[p]
            g = grads.get((p, 0))
            if g is None:
                g = zeros_for((ph.dtype, ph.shape))
            out_refs.append(ts.resolve_input(g))
            out_names.append(f"grad_{ph.name}")

    bwd_gf = ts.finalize(out_refs, out_names)
    bwd_cf = ConcreteFunction(bwd_gf, ts.capture_values, "list")

    fwd_gf = _assemble_forward_variant(gf, needed, call_rewrites)
    rt.stats.count_derived_trace()
    rt.stats.count_derived_trace()
    return fwd_gf, bwd_cf, saved_desc, float_pos


def _diff_call_node(
    gf, node, vid, out_grads, saved_value, accumulate, call_rewrites,
    aug_specs, node_idx, call_concrete,
):
    callee = gf.library[node.attrs["function"]]
    c_fwd, c_bwd_cf, c_desc, c_float = get_forward_backward(callee)
    call_rewrites[node_idx] = c_fwd
    m = len(callee.outputs)
    for k in range(m, len(c_fwd.outputs)):
        aug_specs[(vid, k)] = c_fwd.output_specs[k]
    args = []
    for j, spec in enumerate(callee.output_specs):
        g = out_grads[j] if j < len(out_grads) else None
        args.append(g if g is not None else zeros_for(spec))
    for d in c_desc:
        if d[0] == "input":
            args.append(saved_value(node.inputs[d[1]]))
        else:
            args.append(saved_value((vid, m + d[1])))
    results = call_concrete(c_bwd_cf, args)
    for pos, g in zip(c_float, results):
        accumulate(node.inputs[pos], g)


def _diff_host_call(gf, node, out_grads, saved_value, accumulate):
    from .escape import backward_callback_for

    in_specs = tuple(gf.spec_of(r) for r in node.inputs)
    bwd_id, float_in = backward_callback_for(node.attrs["callback"], in_specs)
    args = [saved_value(r) for r in node.inputs]
    for j, spec in enumerate(node.out_specs):
        g = out_grads[j] if j < len(out_grads) else None
        args.append(g if g is not None else zeros_for(spec))
    results = dispatch("host_call", args, {"callback": bwd_id})
    for pos, g in zip(float_in, results):
        accumulate(node.inputs[pos], g)


def _assemble_forward_variant(gf, needed, call_rewrites) -> GraphFunction:
    library = dict(gf.library)
    rewrite_names: Dict[int, str] = {}
    for idx, c_fwd in call_rewrites.items():
        name = c_fwd.name
        if name in library and library[name] is not c_fwd:
            v = 1
            while f"{name}_v{v}" in library:
                v += 1
            name = f"{name}_v{v}"
        library[name] = c_fwd
        rewrite_names[idx] = name

    nodes = []
    for i, node in enumerate(gf.nodes):
        if i in call_rewrites:
            c_fwd = call_rewrites[i]
            attrs = dict(node.attrs)
            attrs["function"] = rewrite_names[i]
            nodes.append(
                Node(
                    op=node.op,
                    inputs=node.inputs,
                    attrs=attrs,
                    device=node.device,
                    out_specs=tuple(c_fwd.output_specs),
                )
            )
        else:
            nodes.append(node)
    outputs = list(gf.outputs) + [
        (f"saved_{k}", ref) for k, ref in enumerate(needed)
    ]
    return GraphFunction(gf.name + "_fwd", gf.inputs, nodes, outputs, library)
