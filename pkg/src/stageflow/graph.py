"""Dataflow graph functions: the staged-execution IR.

A GraphFunction is an immutable, acyclic dataflow graph with named inputs
and outputs. Value references are ``(value_id, output_index)`` pairs where
value ids below the input count denote placeholders and the rest denote
nodes in topological (= recorded program) order.

Graphs compose: a node may invoke another graph function by name through
the ``function``-kind attribute; callees live in the ``library`` of the
enclosing function.

The optimizer lives here too: ``prune`` removes stateless nodes that no
output (and no retained stateful node) depends on, and ``constant_fold``
evaluates stateless nodes whose inputs are all constants. Both preserve
semantics exactly; kernels are deterministic, so folded graphs are
bit-identical to unfolded ones.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .devices import DeviceName
from .dtypes import DType, SymShape
from .errors import CorruptGraph, KernelError
from .tensor import Tensor

Ref = Tuple[int, int]  # (value id, output index)

# Ops whose attrs name other graph functions, keyed to the attr names.
FUNCTION_ATTRS = {
    "call_function": ("function",),
    "cond": ("then_branch", "else_branch"),
    "while_loop": ("loop_cond", "loop_body"),
}

_name_counter = itertools.count()


def fresh_name(base: str) -> str:
    return f"{base}__{next(_name_counter)}"


@dataclass(frozen=True)
class Placeholder:
    name: str
    dtype: DType
    shape: SymShape
    is_variable_ref: bool = False


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Ref, ...]
    attrs: Dict[str, Any]
    device: Optional[DeviceName]
    out_specs: Tuple[Tuple[DType, SymShape], ...]


class GraphFunction:
    """Immutable once constructed; safe to share across threads."""

    def __init__(
        self,
        name: str,
        inputs: Sequence[Placeholder],
        nodes: Sequence[Node],
        outputs: Sequence[Tuple[str, Ref]],
        library: Optional[Dict[str, "GraphFunction"]] = None,
    ):
        self.name = name
        self.inputs: Tuple[Placeholder, ...] = tuple(inputs)
        self.nodes: Tuple[Node, ...] = tuple(nodes)
        self.outputs: Tuple[Tuple[str, Ref], ...] = tuple(outputs)
        self.library: Dict[str, GraphFunction] = dict(
            sorted((library or {}).items())
        )
        self.serializable = not any(n.op == "host_call" for n in self.nodes) and all(
            f.serializable for f in self.library.values()
        )
        self._validate()
        self._plan = None  # compiled executor plan, set lazily
        self._fwd_bwd = None  # derived (forward variant, backward fn), set lazily

    # -- well-formedness -----------------------------------------------------

    def _validate(self) -> None:
        n_in = len(self.inputs)
        for i, node in enumerate(self.nodes):
            for vid, out_idx in node.inputs:
                if vid < 0 or vid >= n_in + i:
                    raise CorruptGraph(
                        f"{self.name}: node {i} ({node.op}) references value "
                        f"{vid} that is not an input or an earlier node"
                    )
                if vid >= n_in and out_idx >= len(self.nodes[vid - n_in].out_specs):
                    raise CorruptGraph(
                        f"{self.name}: node {i} references missing output "
                        f"{out_idx} of node {vid - n_in}"
                    )
        for _, (vid, out_idx) in self.outputs:
            if vid < 0 or vid >= n_in + len(self.nodes):
                raise CorruptGraph(f"{self.name}: dangling output reference")

    # -- introspection ---------------------------------------------------------

    def spec_of(self, ref: Ref) -> Tuple[DType, SymShape]:
        vid, out_idx = ref
        if vid < len(self.inputs):
            ph = self.inputs[vid]
            return ph.dtype, ph.shape
        return self.nodes[vid - len(self.inputs)].out_specs[out_idx]

    @property
    def output_specs(self) -> List[Tuple[DType, SymShape]]:
        return [self.spec_of(ref) for _, ref in self.outputs]

    def node_of(self, ref: Ref) -> Optional[Node]:
        vid, _ = ref
        if vid < len(self.inputs):
            return None
        return self.nodes[vid - len(self.inputs)]

    def op_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for n in self.nodes:
            counts[n.op] = counts.get(n.op, 0) + 1
        return counts

    def resolve_function(self, name: str) -> Optional["GraphFunction"]:
        return self.library.get(name)

    def __repr__(self) -> str:
        return (
            f"<GraphFunction {self.name!r}: {len(self.inputs)} inputs, "
            f"{len(self.nodes)} nodes, {len(self.outputs)} outputs>"
        )

    # -- structural comparison -------------------------------------------------

    def _normal_form(self, top: bool = True):
        def norm_attr(v):
            if isinstance(v, Tensor):
                return ("tensor", v.dtype, v.shape, v.raw().tobytes())
            if isinstance(v, DType):
                return ("dtype", v)
            return v

        return (
            tuple(self.inputs),
            tuple(
                (
                    n.op,
                    n.inputs,
                    tuple(sorted((k, norm_attr(v)) for k, v in n.attrs.items())),
                    n.device,
                    n.out_specs,
                )
                for n in self.nodes
            ),
            self.outputs,
            tuple(
                (name, f._normal_form(top=False))
                for name, f in sorted(self.library.items())
            ),
        )

    def structurally_equal(self, other: "GraphFunction") -> bool:
        """Equality up to the (unserialized) top-level function name."""
        return self._normal_form() == other._normal_form()


class GraphBuilder:
    """Accumulates placeholders and nodes while a trace is open."""

    # Building-time refs: ("p", idx) for placeholders, ("n", idx, out) for
    # node outputs. Placeholders may be appended after nodes already exist
    # (closure captures), so the final ids are only assigned at finalize.

    def __init__(self):
        self.placeholders: List[Placeholder] = []
        self.nodes: List[dict] = []

    def add_placeholder(
        self, name: str, dtype: DType, shape: SymShape, is_variable_ref: bool = False
    ):
        self.placeholders.append(Placeholder(name, dtype, tuple(shape), is_variable_ref))
        return ("p", len(self.placeholders) - 1)

    def add_node(
        self,
        op: str,
        inputs: Sequence,
        attrs: Dict[str, Any],
        device: Optional[DeviceName],
        out_specs: Sequence[Tuple[DType, SymShape]],
    ):
        self.nodes.append(
            dict(op=op, inputs=list(inputs), attrs=dict(attrs), device=device,
                 out_specs=tuple(out_specs))
        )
        idx = len(self.nodes) - 1
        return [("n", idx, j) for j in range(len(out_specs))]

    def finalize(
        self,
        name: str,
        output_refs: Sequence,
        output_names: Sequence[str],
        library: Optional[Dict[str, GraphFunction]] = None,
    ) -> GraphFunction:
        n_in = len(self.placeholders)

        def to_ref(bref) -> Ref:
            if bref[0] == "p":
                return (bref[1], 0)
            return (n_in + bref[1], bref[2])

        nodes = [
            Node(
                op=n["op"],
                inputs=tuple(to_ref(r) for r in n["inputs"]),
                attrs=n["attrs"],
                device=n["device"],
                out_specs=n["out_specs"],
            )
            for n in self.nodes
        ]
        outputs = [
            (oname, to_ref(oref)) for oname, oref in zip(output_names, output_refs)
        ]
        return GraphFunction(name, self.placeholders, nodes, outputs, library)


# ---------------------------------------------------------------------------
# Statefulness, reachability, and the optimizer passes
# ---------------------------------------------------------------------------


def node_is_stateful(node: Node, library: Dict[str, GraphFunction]) -> bool:
    """A node is stateful if its op is, or if a function it calls is."""
    from .ops import get_op_def

    if node.op in FUNCTION_ATTRS:
        for attr_name in FUNCTION_ATTRS[node.op]:
            fn_name = node.attrs.get(attr_name)
            callee = library.get(fn_name) if isinstance(fn_name, str) else None
            if callee is not None and graph_is_stateful(callee):
                return True
        return False
    return get_op_def(node.op).stateful


def graph_is_stateful(gf: GraphFunction) -> bool:
    return any(node_is_stateful(n, gf.library) for n in gf.nodes)


def _referenced_functions(nodes: Sequence[Node]) -> set:
    names = set()
    for n in nodes:
        for attr_name in FUNCTION_ATTRS.get(n.op, ()):
            v = n.attrs.get(attr_name)
            if isinstance(v, str):
                names.add(v)
    return names


def _rebuild(
    gf: GraphFunction, kept: List[int], replacements: Dict[Ref, Ref]
) -> GraphFunction:
    """Rebuild from a subset of node indices plus ref replacements.

    ``replacements`` maps old refs to old refs (e.g. a folded node's output
    to its new constant node); it is applied before renumbering.
    """
    n_in = len(gf.inputs)
    new_id: Dict[int, int] = {}
    for new_idx, old_idx in enumerate(kept):
        new_id[n_in + old_idx] = n_in + new_idx

    def remap(ref: Ref) -> Ref:
        ref = replacements.get(ref, ref)
        vid, out_idx = ref
        if vid < n_in:
            return ref
        return (new_id[vid], out_idx)

    nodes = [
        Node(
            op=gf.nodes[i].op,
            inputs=tuple(remap(r) for r in gf.nodes[i].inputs),
            attrs=gf.nodes[i].attrs,
            device=gf.nodes[i].device,
            out_specs=gf.nodes[i].out_specs,
        )
        for i in kept
    ]
    outputs = [(name, remap(ref)) for name, ref in gf.outputs]
    lib_names = _referenced_functions(nodes)
    library = {k: v for k, v in gf.library.items() if k in lib_names}
    return GraphFunction(gf.name, gf.inputs, nodes, outputs, library)


def prune(gf: GraphFunction) -> GraphFunction:
    """Drop stateless nodes that neither outputs nor stateful nodes reach.

    Stateful nodes are always retained (their effects are the point), and so
    is everything upstream of them. Idempotent; semantics-preserving.
    """
    n_in = len(gf.inputs)
    keep = [False] * len(gf.nodes)
    worklist: List[int] = []

    def mark(ref: Ref) -> None:
        vid = ref[0]
        if vid >= n_in and not keep[vid - n_in]:
            keep[vid - n_in] = True
            worklist.append(vid - n_in)

    for _, ref in gf.outputs:
        mark(ref)
    for i, node in enumerate(gf.nodes):
        if node_is_stateful(node, gf.library) and not keep[i]:
            keep[i] = True
            worklist.append(i)
    while worklist:
        i = worklist.pop()
        for ref in gf.nodes[i].inputs:
            mark(ref)

    kept = [i for i, k in enumerate(keep) if k]
    if len(kept) == len(gf.nodes):
        return gf
    return _rebuild(gf, kept, {})


def constant_fold(gf: GraphFunction) -> GraphFunction:
    """Evaluate stateless nodes whose inputs are all constants.

    Folded nodes are replaced by constant nodes holding the eagerly computed
    values. A kernel failure during folding keeps the node untouched. Nodes
    are visited in topological order, so one pass reaches the fixpoint.
    """
    from .executor import run_node_for_folding

    n_in = len(gf.inputs)
    new_nodes: List[Node] = []
    remap: Dict[Ref, Ref] = {}  # old ref -> new ref
    const_vals: Dict[Ref, Tensor] = {}  # keyed by NEW ref
    changed = False

    def mapped(ref: Ref) -> Ref:
        return remap.get(ref, ref)

    for i, node in enumerate(gf.nodes):
        in_refs = [mapped(r) for r in node.inputs]
        folded_outs = None
        if node.op != "constant" and not node_is_stateful(node, gf.library) and all(
            r in const_vals for r in in_refs
        ):
            try:
                folded_outs = run_node_for_folding(
                    node, [const_vals[r] for r in in_refs], gf.library
                )
            except KernelError:
                folded_outs = None
        if folded_outs is not None:
            for j, value in enumerate(folded_outs):
                new_nodes.append(
                    Node(
                        op="constant",
                        inputs=(),
                        attrs={"value": value},
                        device=node.device,
                        out_specs=((value.dtype, value.shape),),
                    )
                )
                new_ref = (n_in + len(new_nodes) - 1, 0)
                remap[(n_in + i, j)] = new_ref
                const_vals[new_ref] = value
            changed = True
            continue
        new_nodes.append(
            Node(
                op=node.op,
                inputs=tuple(in_refs),
                attrs=node.attrs,
                device=node.device,
                out_specs=node.out_specs,
            )
        )
        new_vid = n_in + len(new_nodes) - 1
        for j in range(len(node.out_specs)):
            remap[(n_in + i, j)] = (new_vid, j)
        if node.op == "constant":
            const_vals[(new_vid, 0)] = node.attrs["value"]

    if not changed:
        return gf
    outputs = [(name, mapped(ref)) for name, ref in gf.outputs]
    # Folding orphans the constant sources it consumed; drop any constant
    # with no remaining consumers so folding and pruning commute.
    used = {r[0] for n in new_nodes for r in n.inputs}
    used |= {ref[0] for _, ref in outputs}
    keep = [
        i for i, n in enumerate(new_nodes)
        if n.op != "constant" or (n_in + i) in used
    ]
    if len(keep) != len(new_nodes):
        new_id = {n_in + old: n_in + new for new, old in enumerate(keep)}

        def renum(ref: Ref) -> Ref:
            vid, out_idx = ref
            return ref if vid < n_in else (new_id[vid], out_idx)

        new_nodes = [
            Node(n.op, tuple(renum(r) for r in n.inputs), n.attrs, n.device,
                 n.out_specs)
            for n in (new_nodes[i] for i in keep)
        ]
        outputs = [(name, renum(ref)) for name, ref in outputs]
    lib_names = _referenced_functions(new_nodes)
    library = {k: v for k, v in gf.library.items() if k in lib_names}
    return GraphFunction(gf.name, gf.inputs, new_nodes, outputs, library)


def optimize(gf: GraphFunction) -> GraphFunction:
    """The finalize-time pipeline: fold constants, then prune."""
    return prune(constant_fold(gf))
