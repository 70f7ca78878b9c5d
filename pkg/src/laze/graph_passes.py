"""Whole-graph rewrites.

All passes are pure functions from graph to graph, applied in a fixed
order: deduplication, constant folding, axis-tag propagation, call
concatenation, materialization.  Each preserves the value of every
output.  A :class:`PassLog` collects one line per structural event for
inspection.

The cost model reported by :func:`cost_report` counts, for one
evaluation of all outputs, the number of materialized operands read
(R), buffers written (W), and node evaluations performed (C), where
every node computes array-at-a-time.  Unmaterialized nodes are
recomputed once per demanded evaluation of each consumer, which is what
makes the materialization trade-off visible.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from . import expr as ex
from .adfg import (
    Array, AxisTag, Call, CallResult, Concatenate, Data, Einsum,
    FunctionDefinition, Graph, IndexLambda, Indexing, Node, Placeholder,
    Receive, Reshape, Send, SendWrapper, Slice, Stack, all_nodes,
    index_name, merge_axis_tags, node_count, replace_inputs, retag,
    set_materialized, successor_counts, topo_order,
)
from .errors import LazeError, ShapeMismatch
from .frontend import eager_eval

logger = logging.getLogger(__name__)


# {{{ configuration and logging

@dataclass(frozen=True)
class PassConfig:
    """Switches for the transformation pipeline.

    ``concatenation_eligible`` restricts call concatenation to the named
    functions; ``None`` means every outlined function is eligible.
    ``materialization_override``, when given, replaces the
    materialization heuristic with an explicit node set (forced nodes
    such as outputs and reductions are still flagged).
    """

    dedup: bool = True
    constant_fold: bool = True
    propagate_tags: bool = True
    concatenate_calls: bool = True
    materialize: bool = True
    fuse_loops: bool = True
    contract_arrays: bool = True
    tag_parallel: bool = True
    concatenation_eligible: frozenset[str] | None = None
    materialization_override: frozenset[Array] | None = None


class PassLog:
    """Line-oriented record of what the passes did."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def note(self, line: str) -> None:
        self.lines.append(line)
        logger.debug("%s", line)

    def __str__(self) -> str:
        return "\n".join(self.lines)

# }}}


# {{{ mapper base

class GraphMapper:
    """Memoized bottom-up graph rebuilder.

    The memo is keyed by structural node identity, so distinct objects
    with equal structure map to one result: every mapper deduplicates
    as a side effect.
    """

    def __init__(self) -> None:
        self._memo: dict[Node, Node] = {}

    def rec(self, node: Node) -> Node:
        if node in self._memo:
            return self._memo[node]
        result = self.map_node(node)
        self._memo[node] = result
        return result

    def map_node(self, node: Node) -> Node:
        return replace_inputs(node, self.rec)

    def map_graph(self, graph: Graph) -> Graph:
        return Graph({name: self.rec(node)
                      for name, node in graph.outputs})

# }}}


# {{{ dedup

def dedup(graph: Graph, log: PassLog | None = None) -> Graph:
    """Collapse structurally equal nodes to one instance."""
    before = node_count(graph)
    out = GraphMapper().map_graph(graph)
    if log is not None:
        log.note(f"dedup: {before} -> {node_count(out)} nodes")
    return out

# }}}


# {{{ constant folding

def _foldable_map(graph: Graph) -> dict[Node, bool]:
    """A node folds if everything under it is embedded data."""
    out: dict[Node, bool] = {}
    for node in topo_order(graph):
        if isinstance(node, Data):
            out[node] = True
        elif isinstance(node, (Placeholder, Receive, Send, SendWrapper,
                               Call, CallResult, FunctionDefinition)):
            out[node] = False
        else:
            out[node] = all(out[c] for c in node.traversal_children())
    return out


def constant_fold(graph: Graph, log: PassLog | None = None) -> Graph:
    """Evaluate maximal constant subgraphs into data nodes."""
    foldable = _foldable_map(graph)

    class _Fold(GraphMapper):
        def map_node(self, node: Node) -> Node:
            if foldable.get(node) and not isinstance(node, Data):
                value = eager_eval(node)
                if log is not None:
                    log.note(f"constant_fold: {type(node).__name__} with "
                             f"shape {node.shape} -> Data")
                return Data(value, node.axis_tags, node.materialized)
            return super().map_node(node)

    before = node_count(graph)
    out = _Fold().map_graph(graph)
    if log is not None:
        log.note(f"constant_fold: {before} -> {node_count(out)} nodes")
    return out

# }}}


# {{{ axis-tag propagation

class _UnionFind:
    def __init__(self) -> None:
        self._parent: dict = {}

    def find(self, x):
        parent = self._parent.setdefault(x, x)
        if parent != x:
            root = self.find(parent)
            self._parent[x] = root
            return root
        return x

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self._parent[rb] = ra

    def classes(self) -> dict:
        out: dict = {}
        for x in list(self._parent):
            out.setdefault(self.find(x), []).append(x)
        return out


AxisRef = tuple[Array, int]


def _identity_axes(node: IndexLambda) -> Iterator[tuple[Array, int, int]]:
    """(input, input_axis, output_axis) for plain ``i<k>`` accesses."""
    names = {index_name(k): k for k in range(node.rank)}
    for load in ex.loads_in(node.expression):
        inp = node.bindings[load.ref]
        for j, idx in enumerate(load.indices):
            if isinstance(idx, ex.Var) and idx.name in names:
                yield inp, j, names[idx.name]


def _reshape_one_to_one(in_shape: tuple[int, ...],
                        out_shape: tuple[int, ...],
                        ) -> Iterator[tuple[int, int]]:
    """Axes that survive a reshape unchanged: single-axis blocks of the
    minimal equal-product decomposition."""
    i = o = 0
    while i < len(in_shape) and o < len(out_shape):
        si, so = i, o
        pi, po = in_shape[i], out_shape[o]
        while pi != po:
            if pi < po:
                i += 1
                if i >= len(in_shape):
                    return
                pi *= in_shape[i]
            else:
                o += 1
                if o >= len(out_shape):
                    return
                po *= out_shape[o]
        if i == si and o == so:
            yield si, so
        i += 1
        o += 1


def io_axis_pairs(node: Array) -> Iterator[tuple[AxisRef, int]]:
    """Correspondences from an input's axis to one of *node*'s axes."""
    if isinstance(node, IndexLambda):
        for inp, j, k in _identity_axes(node):
            yield (inp, j), k
    elif isinstance(node, Reshape):
        for j, k in _reshape_one_to_one(node.array.shape, node.shape):
            yield (node.array, j), k
    elif isinstance(node, Indexing):
        out_axis = 0
        for in_axis, sel in enumerate(node.selectors):
            if isinstance(sel, int):
                continue
            if isinstance(sel, Slice):
                full = (sel.start == 0 and sel.step == 1
                        and sel.stop == node.array.shape[in_axis])
                if full:
                    yield (node.array, in_axis), out_axis
                out_axis += 1
            else:
                # the gather's value axes mirror the index array's axes
                for t in range(sel.rank):
                    yield (sel, t), out_axis + t
                out_axis += sel.rank
    elif isinstance(node, Einsum):
        from .adfg import parse_einsum
        in_subs, out_sub, _ = parse_einsum(
                node.subscripts, [a.shape for a in node.args])
        pos_of = {letter: q for q, letter in enumerate(out_sub)}
        for arg, sub in zip(node.args, in_subs):
            for pos, letter in enumerate(sub):
                if letter in pos_of:
                    yield (arg, pos), pos_of[letter]
    elif isinstance(node, Concatenate):
        for a in node.arrays:
            for j in range(node.rank):
                if j != node.axis:
                    yield (a, j), j
    elif isinstance(node, Stack):
        for a in node.arrays:
            for j in range(a.rank):
                yield (a, j), j if j < node.axis else j + 1
    elif isinstance(node, SendWrapper):
        for j in range(node.rank):
            yield (node.passthrough, j), j


def cross_input_axis_pairs(node: Array) -> Iterator[tuple[AxisRef, AxisRef]]:
    """Input-to-input correspondences (einsum letters shared between
    operands, including contracted ones)."""
    if isinstance(node, Einsum):
        from .adfg import parse_einsum
        in_subs, _, _ = parse_einsum(
                node.subscripts, [a.shape for a in node.args])
        by_letter: dict[str, list[AxisRef]] = {}
        for arg, sub in zip(node.args, in_subs):
            for pos, letter in enumerate(sub):
                by_letter.setdefault(letter, []).append((arg, pos))
        for refs in by_letter.values():
            for other in refs[1:]:
                yield refs[0], other


def _function_axis_summary(
        fdef: FunctionDefinition,
        ) -> list[tuple[tuple[str, str, int], tuple[str, str, int]]]:
    """Connected boundary-axis pairs of a function body.

    Boundary axes are named ``("param", name, axis)`` and
    ``("result", name, axis)``; every pair within one connected class is
    reported.
    """
    uf = _UnionFind()
    body = set()
    stack = [node for _, node in fdef.returns]
    while stack:
        node = stack.pop()
        if node in body:
            continue
        body.add(node)
        stack.extend(node.traversal_children())
    for node in body:
        if isinstance(node, Array):
            for (a, j), k in io_axis_pairs(node):
                uf.union((a, j), (node, k))
            for ra, rb in cross_input_axis_pairs(node):
                uf.union(ra, rb)

    boundary: dict[AxisRef, list[tuple[str, str, int]]] = {}
    for p in fdef.parameters:
        for j in range(p.rank):
            boundary.setdefault(uf.find((p, j)), []).append(
                    ("param", p.name, j))
    for name, r in fdef.returns:
        for j in range(r.rank):
            boundary.setdefault(uf.find((r, j)), []).append(
                    ("result", name, j))
    pairs = []
    for members in boundary.values():
        for other in members[1:]:
            pairs.append((members[0], other))
    return pairs


def propagate_tags(graph: Graph, log: PassLog | None = None) -> Graph:
    """Spread axis tags along connected axes until nothing changes.

    Two axes are connected when an operation aligns them elementwise:
    identity accesses of pointwise expressions, shared einsum letters,
    non-axis sides of concatenate/stack, full slices, one-to-one
    reshape axes, and call boundaries.  A key bound to two values in
    one class raises :class:`~laze.errors.TagConflict`.
    """
    nodes = [n for n in all_nodes(graph) if isinstance(n, Array)]
    uf = _UnionFind()
    summaries: dict[FunctionDefinition, list] = {}

    for node in nodes:
        for (a, j), k in io_axis_pairs(node):
            uf.union((a, j), (node, k))
        for ra, rb in cross_input_axis_pairs(node):
            uf.union(ra, rb)
        if isinstance(node, CallResult):
            call = node.call

            def resolve(end: tuple[str, str, int],
                        call: Call = call) -> AxisRef:
                kind, name, axis = end
                if kind == "param":
                    return (call.args_dict[name], axis)
                # peer results key by their (possibly absent) result node
                return (CallResult(call, name), axis)

            if call.function not in summaries:
                summaries[call.function] = _function_axis_summary(
                        call.function)
            for ea, eb in summaries[call.function]:
                uf.union(resolve(ea), resolve(eb))

    # merge tags per class
    class_tags: dict = {}
    for node in nodes:
        for axis in range(node.rank):
            root = uf.find((node, axis))
            merged = merge_axis_tags(
                    class_tags.get(root, ()), node.axis_tags[axis],
                    what=f"{type(node).__name__} axis {axis}")
            class_tags[root] = merged

    changed = 0

    class _Retag(GraphMapper):
        def map_node(self, node: Node) -> Node:
            nonlocal changed
            rebuilt = replace_inputs(node, self.rec)
            if not isinstance(node, Array):
                return rebuilt
            new_tags = tuple(
                    class_tags.get(uf.find((node, axis)), ())
                    for axis in range(node.rank))
            if new_tags != node.axis_tags:
                changed += 1
                rebuilt = retag(rebuilt, new_tags)
            return rebuilt

    out = _Retag().map_graph(graph)
    if log is not None:
        log.note(f"propagate_tags: updated tags on {changed} nodes")
    return out

# }}}


# {{{ call concatenation

@dataclass
class _GroupPlan:
    members: list[Call]
    new_function: FunctionDefinition
    param_axis: dict[str, int]
    result_axis: dict[str, int]
    new_call: Call | None = None


def _call_ancestors(call: Call) -> set[Node]:
    seen: set[Node] = set()
    stack: list[Node] = [a for _, a in call.args]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(node.traversal_children())
    return seen


def _body_nodes(fdef: FunctionDefinition) -> set[Node]:
    seen: set[Node] = set()
    stack: list[Node] = [r for _, r in fdef.returns]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(node.traversal_children())
    return seen


def _match_axes(fdef: FunctionDefinition,
                ) -> tuple[dict[str, int], dict[str, int], set[AxisRef]] | str:
    """Pick a concatenation axis per parameter and result.

    Returns the axis choices and the connected axis class, or a string
    describing why no consistent choice exists.
    """
    body = _body_nodes(fdef)
    if any(isinstance(n, (Call, CallResult, Send, SendWrapper, Receive))
           for n in body):
        return "body contains calls or communication"

    uf = _UnionFind()
    consumers: dict[Node, list[Array]] = {}
    for node in body:
        if not isinstance(node, Array):
            continue
        for (a, j), k in io_axis_pairs(node):
            uf.union((a, j), (node, k))
        for ra, rb in cross_input_axis_pairs(node):
            uf.union(ra, rb)
        for c in set(node.traversal_children()):
            consumers.setdefault(c, []).append(node)

    params = fdef.parameters
    if not params:
        return "function has no parameters"

    for axis in range(params[0].rank):
        root = uf.find((params[0], axis))
        members = {(n, ax) for n in body if isinstance(n, Array)
                   for ax in range(n.rank)
                   if uf.find((n, ax)) == root}

        def axes_of(node: Array) -> list[int]:
            return [ax for (n, ax) in members if n == node]

        if any(len(axes_of(p)) != 1 for p in params):
            continue
        if any(len(axes_of(r)) != 1 for _, r in fdef.returns):
            continue
        # every consumer edge must carry the class axis forward,
        # otherwise output slices would mix contributions
        ok = True
        for (n, ax) in members:
            for c in consumers.get(n, []):
                carried = [k for (a, j), k in io_axis_pairs(c)
                           if a == n and j == ax]
                if not any((c, k) in members for k in carried):
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        return ({p.name: axes_of(p)[0] for p in params},
                {name: axes_of(r)[0] for name, r in fdef.returns},
                members)
    return "no axis aligns every parameter with every result"


def _rebuild_body(fdef: FunctionDefinition, members: set[AxisRef],
                  factor: int) -> FunctionDefinition:
    """The same function over inputs grown *factor*-fold along the
    matched axes."""

    def patched_shape(node: Array) -> tuple[int, ...]:
        return tuple(e * factor if (node, ax) in members else e
                     for ax, e in enumerate(node.shape))

    class _Grow(GraphMapper):
        def map_node(self, node: Node) -> Node:
            if isinstance(node, Placeholder):
                return Placeholder(node.name, patched_shape(node),
                                   node.dtype, node.axis_tags,
                                   node.materialized)
            if isinstance(node, IndexLambda):
                return IndexLambda(node.expression,
                                   tuple(self.rec(b) for b in node.bindings),
                                   patched_shape(node), None,
                                   node.axis_tags, node.materialized)
            if isinstance(node, Reshape):
                return Reshape(self.rec(node.array), patched_shape(node),
                               node.axis_tags, node.materialized)
            if isinstance(node, Indexing):
                new_selectors = []
                out_axis = 0
                for in_axis, sel in enumerate(node.selectors):
                    if isinstance(sel, int):
                        new_selectors.append(sel)
                        continue
                    if isinstance(sel, Slice):
                        if (node, out_axis) in members:
                            new_selectors.append(
                                    Slice(0, node.shape[out_axis] * factor, 1))
                        else:
                            new_selectors.append(sel)
                        out_axis += 1
                    else:
                        new_selectors.append(self.rec(sel))
                        out_axis += sel.rank
                return Indexing(self.rec(node.array), tuple(new_selectors),
                                node.axis_tags, node.materialized)
            rebuilt = replace_inputs(node, self.rec)
            if isinstance(rebuilt, Array) \
                    and rebuilt.shape != patched_shape(node):
                raise ShapeMismatch(
                        f"{type(node).__name__} does not scale along the "
                        f"matched axis")
            return rebuilt

    grow = _Grow()
    return FunctionDefinition(
            fdef.name,
            tuple(grow.rec(p) for p in fdef.parameters),
            tuple((name, grow.rec(r)) for name, r in fdef.returns))


def concatenate_calls(
        graph: Graph,
        eligible: frozenset[str] | None = None,
        log: PassLog | None = None,
        ) -> Graph:
    """Merge independent calls of one function into a single call over
    concatenated arguments; results are recovered by slicing."""
    calls = [n for n in topo_order(graph) if isinstance(n, Call)]
    by_function: dict[FunctionDefinition, list[Call]] = {}
    for c in calls:
        if eligible is None or c.function.name in eligible:
            by_function.setdefault(c.function, []).append(c)

    plans: dict[Call, _GroupPlan] = {}
    for fdef, group in by_function.items():
        # split into pairwise independent subgroups
        ancestors = {c: _call_ancestors(c) for c in group}

        def depends_on(later: Call, earlier: Call) -> bool:
            return any(isinstance(n, CallResult) and n.call == earlier
                       for n in ancestors[later])

        subgroups: list[list[Call]] = []
        for c in group:
            placed = False
            for sub in subgroups:
                if not any(depends_on(c, m) for m in sub):
                    sub.append(c)
                    placed = True
                    break
            if not placed:
                subgroups.append([c])

        for sub in subgroups:
            if len(sub) < 2:
                continue
            matched = _match_axes(fdef)
            if isinstance(matched, str):
                if log is not None:
                    log.note(f"concatenate_calls: skipping {len(sub)} calls "
                             f"to {fdef.name!r}: {matched}")
                continue
            param_axis, result_axis, members = matched
            try:
                new_function = _rebuild_body(fdef, members, len(sub))
            except (ShapeMismatch, LazeError) as exc:
                if log is not None:
                    log.note(f"concatenate_calls: skipping {len(sub)} calls "
                             f"to {fdef.name!r}: {exc}")
                continue
            plan = _GroupPlan(sub, new_function, param_axis, result_axis)
            for c in sub:
                plans[c] = plan
            if log is not None:
                log.note(f"concatenate_calls: merging {len(sub)} calls to "
                         f"{fdef.name!r} along axis "
                         f"{param_axis[fdef.parameters[0].name]}")

    if not plans:
        return graph

    class _Merge(GraphMapper):
        def map_node(self, node: Node) -> Node:
            if isinstance(node, CallResult) and node.call in plans:
                plan = plans[node.call]
                if plan.new_call is None:
                    args = []
                    for p in plan.new_function.parameters:
                        pieces = tuple(self.rec(m.args_dict[p.name])
                                       for m in plan.members)
                        args.append((p.name, Concatenate(
                                pieces, plan.param_axis[p.name])))
                    plan.new_call = Call(plan.new_function, tuple(args))
                k = plan.members.index(node.call)
                axis = plan.result_axis[node.result]
                whole = CallResult(plan.new_call, node.result)
                extent = node.shape[axis]
                selectors = tuple(
                        Slice(k * extent, (k + 1) * extent, 1)
                        if ax == axis
                        else Slice(0, whole.shape[ax], 1)
                        for ax in range(whole.rank))
                return Indexing(whole, selectors, node.axis_tags,
                                node.materialized)
            return super().map_node(node)

    return _Merge().map_graph(graph)

# }}}


# {{{ materialization

_LEAF_KINDS = (Data, Placeholder, Receive)


def is_materialized(node: Array) -> bool:
    """Whether *node* provides a stored buffer when consumed."""
    return node.materialized or isinstance(node, _LEAF_KINDS)


def materialize(
        graph: Graph,
        override: frozenset[Array] | None = None,
        log: PassLog | None = None,
        ) -> Graph:
    """Decide which nodes get their own storage.

    Always flagged: outputs, einsums with a reduction, call results,
    call arguments, and values shipped by a send.  The heuristic
    additionally flags any
    node that draws on more than one distinct nearest materialized
    ancestor and feeds more than one consumer, cutting recomputation at
    diamonds.  ``override``, when given, replaces the heuristic part
    with an explicit node set.  Greedy in topological order; flags are
    only ever added, and a second application changes nothing.
    """
    def resolve(n: Array) -> Array:
        while isinstance(n, SendWrapper):
            n = n.passthrough
        return n

    succ = successor_counts(graph)
    forced: set[Array] = {resolve(node) for _, node in graph.outputs}
    for n in all_nodes(graph):
        if isinstance(n, Send):
            forced.add(resolve(n.data))
        elif isinstance(n, Call):
            for _, arg in n.args:
                forced.add(resolve(arg))

    flags: dict[Array, bool] = {}
    nearest: dict[Array, frozenset[Array]] = {}

    for node in topo_order(graph):
        if not isinstance(node, Array):
            continue
        if isinstance(node, _LEAF_KINDS):
            nearest[node] = frozenset((node,))
            continue
        inputs = [resolve(c) for c in node.traversal_children()
                  if isinstance(c, Array)]
        if isinstance(node, CallResult):
            inputs = [resolve(a) for _, a in node.call.args]
        above: set[Array] = set()
        for i in inputs:
            if flags.get(i) or isinstance(i, _LEAF_KINDS):
                above.add(i)
            else:
                above.update(nearest[i])

        flag = node in forced or node.materialized
        if isinstance(node, Einsum) and node.has_reduction:
            flag = True
        if isinstance(node, CallResult):
            flag = True
        if isinstance(node, SendWrapper):
            flag = False
        elif override is not None:
            flag = flag or node in override
        elif len(above) > 1 and succ.get(node, 0) > 1:
            flag = True

        flags[node] = flag
        nearest[node] = frozenset((node,)) if flag else frozenset(above)

    count = 0

    class _Flag(GraphMapper):
        def map_node(self, node: Node) -> Node:
            nonlocal count
            rebuilt = replace_inputs(node, self.rec)
            if isinstance(node, Array) and flags.get(node) \
                    and not node.materialized:
                count += 1
                rebuilt = set_materialized(rebuilt, True)
            return rebuilt

    out = _Flag().map_graph(graph)
    if log is not None:
        log.note(f"materialize: flagged {count} nodes")
    return out

# }}}


# {{{ cost model

_COUNTED_KINDS = (IndexLambda, Reshape, Indexing, Einsum, Concatenate,
                  Stack, CallResult)


@dataclass(frozen=True)
class CostReport:
    """Array-at-a-time evaluation cost of one pass over all outputs.

    ``reads`` counts materialized operands consumed per node
    evaluation, ``writes`` counts buffers produced, ``computes`` counts
    node evaluations including recomputation of unmaterialized values.
    """

    reads: int
    writes: int
    computes: int
    num_nodes: int
    num_compute_nodes: int

    @property
    def recomputation_rate(self) -> float:
        return (self.computes - self.num_compute_nodes) \
                / self.num_compute_nodes

    @property
    def materialization_rate(self) -> float:
        return self.writes / self.num_compute_nodes

    def as_text(self) -> str:
        return (f"R:{self.reads} W:{self.writes} C:{self.computes} "
                f"recomputation_rate={self.recomputation_rate:.3f} "
                f"materialization_rate={self.materialization_rate:.3f}")


def cost_report(graph: Graph) -> CostReport:
    arrays = [n for n in all_nodes(graph) if isinstance(n, Array)]
    outputs = {node for _, node in graph.outputs}

    uses: dict[Array, Counter] = {}
    for n in arrays:
        for c in n.traversal_children():
            if isinstance(c, Array):
                uses.setdefault(c, Counter())[n] += 1
        if isinstance(n, CallResult):
            # results draw on the call's arguments
            for _, a in n.call.args:
                uses.setdefault(a, Counter())[n] += 1

    demand: dict[Array, int] = {}
    for node in reversed(topo_order(graph)):
        if not isinstance(node, Array):
            continue
        if is_materialized(node):
            demand[node] = 1
            continue
        total = 1 if node in outputs else 0
        for consumer, multiplicity in uses.get(node, Counter()).items():
            total += multiplicity * demand.get(consumer, 0)
        demand[node] = total

    reads = writes = computes = 0
    compute_nodes = 0
    for node in arrays:
        if not isinstance(node, _COUNTED_KINDS):
            continue
        compute_nodes += 1
        computes += demand[node]
        if node.materialized or node in outputs:
            writes += 1
        inputs = {c for c in node.traversal_children()
                  if isinstance(c, Array)}
        if isinstance(node, CallResult):
            inputs = {a for _, a in node.call.args}
        reads += demand[node] * sum(1 for i in inputs if is_materialized(i))

    return CostReport(reads, writes, computes, len(arrays), compute_nodes)

# }}}


# {{{ pass pipeline

def apply_graph_passes(
        graph: Graph,
        config: PassConfig | None = None,
        log: PassLog | None = None,
        ) -> Graph:
    """Run the whole-graph passes in their fixed order."""
    config = config or PassConfig()
    if config.dedup:
        graph = dedup(graph, log)
    if config.constant_fold:
        graph = constant_fold(graph, log)
    if config.propagate_tags:
        graph = propagate_tags(graph, log)
    if config.concatenate_calls:
        graph = concatenate_calls(graph, config.concatenation_eligible, log)
    if config.materialize:
        graph = materialize(graph, config.materialization_override, log)
    return graph

# }}}
