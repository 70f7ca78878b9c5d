"""Scalar loop IR and lowering.

A program is an ordered list of steps over declared dense arrays.  Each
loop nest writes exactly one array at the identity index of its loop
variables; the right-hand side is a scalar expression over materialized
arrays, with an optional reduction clause at the root.  Function
definitions lower to separate programs invoked by call steps.

Lowering walks the materialized nodes of a graph in topological order
and composes each one's unmaterialized ancestors into a single
comprehension: pointwise expressions substitute inward, reshapes become
row-major index arithmetic, indexing composes affine (and at most one
gather) index maps, and concatenations become selector chains.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np

from . import expr as ex
from .adfg import (
    Array, AxisTag, AxisTags, Call, CallResult, Concatenate, Data, DType,
    Einsum, FunctionDefinition, Graph, IndexLambda, Indexing, Placeholder,
    Receive, Reshape, Send, SendWrapper, Shape, Slice, Stack, index_name,
    index_vars, parse_einsum, topo_order,
)
from .errors import (
    CommunicationInSingleProcessGraph, IrValidationError, LazeError,
    UnsupportedComposition,
)
from .graph_passes import PassConfig, PassLog

INPUT = "input"
OUTPUT = "output"
TEMPORARY = "temporary"


# {{{ IR node types

@dataclass(frozen=True)
class ArrayDecl:
    """One dense row-major array of the program."""

    name: str
    shape: Shape
    dtype: DType
    storage: str
    axis_tags: AxisTags = ()

    def __post_init__(self) -> None:
        if self.storage not in (INPUT, OUTPUT, TEMPORARY):
            raise IrValidationError(f"unknown storage class: {self.storage}")
        if not self.axis_tags:
            object.__setattr__(self, "axis_tags",
                               tuple(() for _ in self.shape))


@dataclass(frozen=True)
class LoopVar:
    """One loop of a nest; ``parallel`` is set by the parallel tagger."""

    name: str
    extent: int
    tags: tuple[AxisTag, ...] = ()
    parallel: bool = False


@dataclass(frozen=True)
class Statement:
    """``target[loop vars] = rhs`` (or a scalar register assignment).

    Writes always use the identity index of the enclosing nest's loop
    variables; ``rhs`` may have a reduction only at its root.
    """

    target: str
    rhs: ex.Expr
    scalar: bool = False


@dataclass(frozen=True)
class LoopNest:
    """A rectangular loop nest executing statements in order."""

    index: int
    loop_vars: tuple[LoopVar, ...]
    body: tuple[Statement, ...]

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(v.extent for v in self.loop_vars)

    def signature(self) -> tuple:
        """Fusion compatibility key: ordered extents with tag keys."""
        return tuple((v.extent, tuple(sorted(t.key for t in v.tags)))
                     for v in self.loop_vars)


@dataclass(frozen=True)
class CallStep:
    """Run a callee program on named caller arrays."""

    callee: "IrProgram"
    arg_map: tuple[tuple[str, str], ...]      # callee input -> caller array
    result_map: tuple[tuple[str, str], ...]   # callee output -> caller array


@dataclass(frozen=True)
class IrProgram:
    """An ordered scalar-loop program over declared arrays."""

    name: str
    arrays: tuple[ArrayDecl, ...]
    steps: tuple[LoopNest | CallStep, ...]
    outputs: tuple[tuple[str, str], ...]      # output name -> array name
    constants: tuple[tuple[str, np.ndarray], ...] = ()

    @property
    def decls(self) -> dict[str, ArrayDecl]:
        return {d.name: d for d in self.arrays}

    @property
    def nests(self) -> tuple[LoopNest, ...]:
        return tuple(s for s in self.steps if isinstance(s, LoopNest))

# }}}


# {{{ comprehension construction

def _affine_sum(terms: list[ex.Expr]) -> ex.Expr:
    out = terms[0]
    for t in terms[1:]:
        out = ex.BinOp("add", out, t)
    return out


def _scaled(idx: ex.Expr, stride: int) -> ex.Expr:
    if stride == 1:
        return idx
    return ex.BinOp("mul", idx, ex.Const(stride))


def _strides(shape: Shape) -> tuple[int, ...]:
    out = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        out[k] = out[k + 1] * shape[k + 1]
    return tuple(out)


def to_comprehension(
        node: Array,
        idx: tuple[ex.Expr, ...],
        name_of: Mapping[Array, str],
        gather_depth: int = 0,
        ) -> ex.Expr:
    """Element ``node[idx]`` as an expression over materialized arrays.

    ``name_of`` declares which ancestors have storage; everything else
    is inlined.  At most one gather indirection is representable; deeper
    chains raise :class:`~laze.errors.UnsupportedComposition`.
    """
    if node in name_of:
        return ex.Load(name_of[node], idx)

    def rec(n: Array, i: tuple[ex.Expr, ...]) -> ex.Expr:
        return to_comprehension(n, i, name_of, gather_depth)

    if isinstance(node, SendWrapper):
        return rec(node.passthrough, idx)

    if isinstance(node, IndexLambda):
        variables = {index_name(k): idx[k] for k in range(node.rank)}

        def inline(load: ex.Load) -> ex.Expr:
            return rec(node.bindings[load.ref], load.indices)

        return ex.substitute(node.expression, variables, inline)

    if isinstance(node, Reshape):
        in_shape = node.array.shape
        out_strides = _strides(node.shape)
        if not idx:
            linear: ex.Expr = ex.Const(0)
        else:
            linear = _affine_sum(
                    [_scaled(e, s) for e, s in zip(idx, out_strides)])
        if len(in_shape) == 0:
            return rec(node.array, ())
        if len(in_shape) == 1:
            return rec(node.array, (linear,))
        in_strides = _strides(in_shape)
        in_idx = []
        for j, (extent, stride) in enumerate(zip(in_shape, in_strides)):
            e: ex.Expr = linear
            if stride != 1:
                e = ex.BinOp("floordiv", e, ex.Const(stride))
            if j > 0:
                e = ex.BinOp("mod", e, ex.Const(extent))
            in_idx.append(e)
        return rec(node.array, tuple(in_idx))

    if isinstance(node, Indexing):
        in_idx: list[ex.Expr] = []
        cursor = 0
        for axis, sel in enumerate(node.selectors):
            if isinstance(sel, int):
                in_idx.append(ex.Const(sel))
            elif isinstance(sel, Slice):
                e = idx[cursor]
                e = _scaled(e, sel.step)
                if sel.start:
                    e = ex.BinOp("add", e, ex.Const(sel.start))
                in_idx.append(e)
                cursor += 1
            else:
                if gather_depth >= 1:
                    raise UnsupportedComposition(
                            "more than one gather indirection level")
                gather_idx = tuple(idx[cursor + t] for t in range(sel.rank))
                in_idx.append(to_comprehension(
                        sel, gather_idx, name_of, gather_depth + 1))
                cursor += sel.rank
        return rec(node.array, tuple(in_idx))

    if isinstance(node, Concatenate):
        # Every branch of the selection chain is evaluated on every
        # lane, so each piece's shifted index is clamped back into its
        # extent; the clamp never alters the selected lane.
        axis_idx = idx[node.axis]
        live = [a for a in node.arrays if a.shape[node.axis]]
        if not live:
            live = [node.arrays[-1]]
        pieces = []
        offset = 0
        for a in live:
            extent = a.shape[node.axis]
            shifted = (ex.BinOp("sub", axis_idx, ex.Const(offset))
                       if offset else axis_idx)
            if len(live) > 1:
                shifted = ex.BinOp("min",
                                   ex.BinOp("max", shifted, ex.Const(0)),
                                   ex.Const(max(extent - 1, 0)))
            inner_idx = tuple(shifted if k == node.axis else e
                              for k, e in enumerate(idx))
            pieces.append((offset + extent, rec(a, inner_idx)))
            offset += extent
        out = pieces[-1][1]
        for bound, piece in reversed(pieces[:-1]):
            out = ex.Where(ex.BinOp("lt", axis_idx, ex.Const(bound)),
                           piece, out)
        return out

    if isinstance(node, Stack):
        axis_idx = idx[node.axis]
        inner_idx = idx[:node.axis] + idx[node.axis + 1:]
        out = rec(node.arrays[-1], inner_idx)
        for k in range(len(node.arrays) - 2, -1, -1):
            out = ex.Where(ex.BinOp("eq", axis_idx, ex.Const(k)),
                           rec(node.arrays[k], inner_idx), out)
        return out

    if isinstance(node, Einsum):
        if node.has_reduction:
            raise UnsupportedComposition(
                    "a reduction result must be materialized before use")
        in_subs, out_sub, _ = parse_einsum(
                node.subscripts, [a.shape for a in node.args])
        pos_of = {letter: q for q, letter in enumerate(out_sub)}
        factors = []
        for arg, sub in zip(node.args, in_subs):
            arg_idx = tuple(idx[pos_of[letter]] for letter in sub)
            factors.append(rec(arg, arg_idx))
        out = factors[0]
        for f in factors[1:]:
            out = ex.BinOp("mul", out, f)
        return out

    if isinstance(node, CallResult):
        raise UnsupportedComposition(
                "a call result must be materialized before use")

    if isinstance(node, (Receive, Send)):
        raise CommunicationInSingleProcessGraph(
                f"cannot lower a {type(node).__name__} node; partition the "
                f"graph first")

    raise LazeError(f"cannot lower node of type {type(node).__name__}")


def _reduction_statement(node: Einsum, target: str,
                         name_of: Mapping[Array, str]) -> ex.Expr:
    in_subs, out_sub, extent_of = parse_einsum(
            node.subscripts, [a.shape for a in node.args])
    pos_of = {letter: q for q, letter in enumerate(out_sub)}
    rletters = node.reduction_letters
    rvar_of = {letter: f"r{j}" for j, letter in enumerate(rletters)}
    factors = []
    for arg, sub in zip(node.args, in_subs):
        arg_idx = tuple(
                ex.Var(index_name(pos_of[letter])) if letter in pos_of
                else ex.Var(rvar_of[letter])
                for letter in sub)
        factors.append(to_comprehension(arg, arg_idx, name_of))
    body = factors[0]
    for f in factors[1:]:
        body = ex.BinOp("mul", body, f)
    axes = tuple((rvar_of[letter], extent_of[letter]) for letter in rletters)
    return ex.Reduce("sum", axes, body)

# }}}


# {{{ lowering

def lower(graph: Graph, config: PassConfig | None = None,
          log: PassLog | None = None, name: str = "main") -> IrProgram:
    """Turn a materialized graph into a scalar-loop program.

    One nest per materialized node (plus a copy nest for any leaf that
    is itself an output); temporaries are named ``_t<k>`` and embedded
    constants ``_c<k>`` by topological position, outputs
    ``out_<name>``.
    """
    config = config or PassConfig()
    order = [n for n in topo_order(graph) if isinstance(n, Array)]
    for n in order:
        if isinstance(n, (Receive, Send, SendWrapper)):
            raise CommunicationInSingleProcessGraph(
                    "cannot lower communication nodes; partition the graph "
                    "first")

    output_name_of: dict[Array, str] = {}
    for out_name, node in graph.outputs:
        output_name_of.setdefault(node, f"out_{out_name}")

    name_of: dict[Array, str] = {}
    decls: list[ArrayDecl] = []
    constants: list[tuple[str, np.ndarray]] = []
    steps: list[LoopNest | CallStep] = []
    callee_cache: dict[FunctionDefinition, IrProgram] = {}
    call_step_at: dict[Call, int] = {}
    counters = {"t": 0, "c": 0, "nest": 0, "callee": 0}

    def declare(node: Array, array_name: str, storage: str) -> None:
        name_of[node] = array_name
        decls.append(ArrayDecl(array_name, node.shape, node.dtype, storage,
                               node.axis_tags))

    def add_nest(node: Array, target: str, rhs: ex.Expr) -> None:
        loop_vars = tuple(
                LoopVar(index_name(k), extent, node.axis_tags[k])
                for k, extent in enumerate(node.shape))
        steps.append(LoopNest(counters["nest"], loop_vars,
                              (Statement(target, rhs),)))
        counters["nest"] += 1

    def copy_out(node: Array) -> None:
        target = output_name_of[node]
        decls.append(ArrayDecl(target, node.shape, node.dtype, OUTPUT,
                               node.axis_tags))
        add_nest(node, target,
                 ex.Load(name_of[node], index_vars(node.rank)))

    for node in order:
        is_output = node in output_name_of
        if isinstance(node, Placeholder):
            declare(node, node.name, INPUT)
            if is_output:
                copy_out(node)
        elif isinstance(node, Data):
            cname = f"_c{counters['c']}"
            counters["c"] += 1
            declare(node, cname, INPUT)
            constants.append((cname, node.data))
            if is_output:
                copy_out(node)
        elif isinstance(node, CallResult):
            target = (output_name_of[node] if is_output
                      else f"_t{counters['t']}")
            if not is_output:
                counters["t"] += 1
            declare(node, target, OUTPUT if is_output else TEMPORARY)
            call = node.call
            if call in call_step_at:
                at = call_step_at[call]
                step = steps[at]
                assert isinstance(step, CallStep)
                steps[at] = replace(step, result_map=step.result_map
                                    + ((node.result, target),))
            else:
                fdef = call.function
                if fdef not in callee_cache:
                    body_graph = Graph(fdef.returns_dict)
                    from .graph_passes import apply_graph_passes
                    body_graph = apply_graph_passes(body_graph, config, log)
                    callee_cache[fdef] = lower(
                            body_graph, config, log,
                            name=f"{fdef.name}_{counters['callee']}")
                    counters["callee"] += 1
                callee = callee_cache[fdef]
                arg_map = []
                for pname, arg in call.args:
                    if arg not in name_of:
                        raise UnsupportedComposition(
                                f"call argument {pname!r} has no storage; "
                                f"materialize it first")
                    arg_map.append((pname, name_of[arg]))
                call_step_at[call] = len(steps)
                steps.append(CallStep(callee, tuple(arg_map),
                                      ((node.result, target),)))
        elif node.materialized or is_output:
            target = (output_name_of[node] if is_output
                      else f"_t{counters['t']}")
            if not is_output:
                counters["t"] += 1
            if isinstance(node, Einsum) and node.has_reduction:
                rhs = _reduction_statement(node, target, name_of)
            else:
                rhs = to_comprehension(node, index_vars(node.rank), name_of)
            declare(node, target, OUTPUT if is_output else TEMPORARY)
            add_nest(node, target, rhs)

    program = IrProgram(
            name=name,
            arrays=tuple(decls),
            steps=tuple(steps),
            outputs=tuple((out_name, output_name_of[node])
                          for out_name, node in graph.outputs),
            constants=tuple(constants))
    validate(program)
    if log is not None:
        log.note(f"lower: {name}: {len(program.nests)} nests, "
                 f"{len(program.arrays)} arrays")
    return program

# }}}


# {{{ validation

def _statement_reads(stmt: Statement) -> Iterator[ex.Load]:
    yield from ex.loads_in(stmt.rhs)


def validate(program: IrProgram) -> None:
    """Check the structural invariants of a program.

    Single writer per array, definition before use in step order,
    declared references only, loads with matching rank, constant
    indices in bounds, reductions only at statement roots.
    """
    decls = {}
    for d in program.arrays:
        if d.name in decls:
            raise IrValidationError(f"array {d.name!r} declared twice")
        decls[d.name] = d

    for out_name, array_name in program.outputs:
        if array_name not in decls:
            raise IrValidationError(
                    f"output {out_name!r} refers to unknown array "
                    f"{array_name!r}")

    written: set[str] = {d.name for d in program.arrays
                         if d.storage == INPUT}
    writer: dict[str, int] = {}
    for step in program.steps:
        if isinstance(step, CallStep):
            callee_inputs = {d.name for d in step.callee.arrays
                             if d.storage == INPUT}
            callee_outputs = {out for out, _ in step.callee.outputs}
            for callee_in, caller in step.arg_map:
                if callee_in not in callee_inputs:
                    raise IrValidationError(
                            f"call binds unknown callee input {callee_in!r}")
                if caller not in decls:
                    raise IrValidationError(
                            f"call argument {caller!r} is not declared")
                if caller not in written:
                    raise IrValidationError(
                            f"call argument {caller!r} read before it is "
                            f"written")
            for callee_out, caller in step.result_map:
                if callee_out not in callee_outputs:
                    raise IrValidationError(
                            f"call reads unknown callee output "
                            f"{callee_out!r}")
                if caller not in decls:
                    raise IrValidationError(
                            f"call result target {caller!r} is not declared")
                if caller in writer:
                    raise IrValidationError(
                            f"array {caller!r} written more than once")
                writer[caller] = -1
                written.add(caller)
            continue

        scalars: set[str] = set()
        var_names = [v.name for v in step.loop_vars]
        if len(var_names) != len(set(var_names)):
            raise IrValidationError(
                    f"nest {step.index} repeats a loop variable")
        for stmt in step.body:
            if isinstance(stmt.rhs, ex.Reduce):
                inner = stmt.rhs.body
            else:
                inner = stmt.rhs
            for sub in ex.walk(inner):
                if isinstance(sub, ex.Reduce):
                    raise IrValidationError(
                            "reduction below the root of a statement")
            allowed = set(var_names)
            if isinstance(stmt.rhs, ex.Reduce):
                allowed |= {rname for rname, _ in stmt.rhs.axes}
            loose = ex.free_variables(stmt.rhs) - allowed - scalars
            if loose:
                raise IrValidationError(
                        f"nest {step.index}: unknown variables "
                        f"{sorted(loose)}")

            for load in _statement_reads(stmt):
                if load.ref in scalars:
                    if load.indices:
                        raise IrValidationError(
                                f"scalar {load.ref!r} loaded with indices")
                    continue
                if load.ref not in decls:
                    raise IrValidationError(
                            f"nest {step.index}: load from undeclared array "
                            f"{load.ref!r}")
                d = decls[load.ref]
                if len(load.indices) != len(d.shape):
                    raise IrValidationError(
                            f"nest {step.index}: {load.ref!r} has rank "
                            f"{len(d.shape)}, loaded with "
                            f"{len(load.indices)} indices")
                if load.ref not in written:
                    raise IrValidationError(
                            f"nest {step.index}: {load.ref!r} read before "
                            f"it is written")
                for extent, idx_e in zip(d.shape, load.indices):
                    if isinstance(idx_e, ex.Const) \
                            and not 0 <= idx_e.value < max(extent, 1):
                        raise IrValidationError(
                                f"nest {step.index}: constant index "
                                f"{idx_e.value} out of bounds for extent "
                                f"{extent}")

            if stmt.scalar:
                scalars.add(stmt.target)
                continue
            if stmt.target not in decls:
                raise IrValidationError(
                        f"nest {step.index}: write to undeclared array "
                        f"{stmt.target!r}")
            d = decls[stmt.target]
            if d.storage == INPUT:
                raise IrValidationError(f"nest {step.index}: write to input "
                                        f"{stmt.target!r}")
            if d.shape != step.extents:
                raise IrValidationError(
                        f"nest {step.index}: target {stmt.target!r} has "
                        f"shape {d.shape}, nest iterates {step.extents}")
            if stmt.target in writer:
                raise IrValidationError(
                        f"array {stmt.target!r} written more than once")
            writer[stmt.target] = step.index
            written.add(stmt.target)

    for out_name, array_name in program.outputs:
        if array_name not in written:
            raise IrValidationError(f"output array {array_name!r} is never "
                                    f"written")

    for _, callee in _callees(program):
        validate(callee)


def _callees(program: IrProgram) -> Iterator[tuple[str, IrProgram]]:
    for step in program.steps:
        if isinstance(step, CallStep):
            yield step.callee.name, step.callee

# }}}


# {{{ textual form

def program_text(program: IrProgram) -> str:
    """Deterministic human-readable dump of a program."""
    lines = [f"program {program.name}"]
    for d in program.arrays:
        dims = ", ".join(str(e) for e in d.shape)
        tag_bits = []
        for ax, tags in enumerate(d.axis_tags):
            for t in tags:
                tag_bits.append(f"axis{ax}:{t.key}={t.value}")
        suffix = f"  tags({', '.join(tag_bits)})" if tag_bits else ""
        lines.append(f"  {d.storage} {d.name}: {d.dtype.value}[{dims}]"
                     f"{suffix}")
    for step in program.steps:
        if isinstance(step, CallStep):
            args = ", ".join(f"{ci}={ca}" for ci, ca in step.arg_map)
            outs = ", ".join(f"{co}->{ca}" for co, ca in step.result_map)
            lines.append(f"  call {step.callee.name}({args}) -> ({outs})")
            continue
        header = ", ".join(
                f"{v.name} < {v.extent}" + (" parallel" if v.parallel else "")
                for v in step.loop_vars)
        lines.append(f"  nest {step.index} [{header}]:")
        registers = {s.target for s in step.body if s.scalar}

        def as_register(load: ex.Load) -> ex.Expr:
            if load.ref in registers and not load.indices:
                return ex.Var(str(load.ref))
            return load

        for stmt in step.body:
            idx = ", ".join(v.name for v in step.loop_vars)
            lhs = stmt.target if stmt.scalar else f"{stmt.target}[{idx}]"
            shown = ex.substitute(stmt.rhs, {}, as_register)
            lines.append(f"    {lhs} = {ex.to_str(shown)}")
    for step in program.steps:
        if isinstance(step, CallStep):
            lines.append("")
            lines.append(program_text(step.callee))
    return "\n".join(lines)

# }}}
