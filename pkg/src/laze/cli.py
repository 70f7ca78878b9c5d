"""Command-line driver.

Programs live in JSON files: a ``nodes`` table (definition before use),
``outputs`` naming result nodes, optional ``functions``, ``tags``,
``materialized`` flags, and ``bindings`` (inline arrays or small
generator forms).  Multi-rank programs put one such table per entry of
``ranks``.  Subcommands expose each pipeline stage: inspect the graph,
re-serialize after the graph passes, print the loop program before or
after its passes, print kernels, execute, or evaluate the reference
semantics.

Exit status: 1 for a malformed program file, 2 for errors raised while
compiling or running it.
"""

from __future__ import annotations

import argparse
import ast
import json
import sys
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import expr as ex
from .adfg import (
    Array, AxisTag, Call, CallResult, Concatenate, Data, DType, Einsum,
    FunctionDefinition, Graph, IndexLambda, Indexing, Node, Placeholder,
    Receive, Reshape, Send, SendWrapper, Slice, Stack, as_dtype, retag,
    set_materialized, topo_order,
)
from .backend import program_source, run_ir
from .distpart import (
    DistributedExecutor, eager_eval_distributed, extract_comm_graph,
    partition,
)
from .errors import LazeError
from .frontend import eager_eval
from .graph_passes import (
    PassConfig, PassLog, apply_graph_passes, cost_report, materialize,
)
from .pipeline import compile_graph
from .scalar_ir import lower, program_text


class SchemaError(Exception):
    """The program file does not follow the expected layout."""


# {{{ expression parsing

_CALL_FORMS = {"min", "max", "where", "abs", "sqrt", "exp", "log"}

_AST_BINOP = {
    ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "truediv",
    ast.FloorDiv: "floordiv", ast.Mod: "mod", ast.Pow: "pow",
}

_AST_CMP = {
    ast.Lt: "lt", ast.LtE: "le", ast.Gt: "gt", ast.GtE: "ge",
    ast.Eq: "eq", ast.NotEq: "ne",
}


def parse_expression(text: str, slot_of: Mapping[str, int]) -> ex.Expr:
    """Parse a scalar expression; array names index by position."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as err:
        raise SchemaError(f"cannot parse expression {text!r}: {err}") \
            from None

    def rec(n: ast.AST) -> ex.Expr:
        if isinstance(n, ast.Expression):
            return rec(n.body)
        if isinstance(n, ast.Constant):
            if isinstance(n.value, (bool, int, float)):
                return ex.Const(n.value)
            raise SchemaError(f"unsupported constant {n.value!r}")
        if isinstance(n, ast.Name):
            if n.id in slot_of:
                return ex.Load(slot_of[n.id], ())
            if n.id.startswith("i") and n.id[1:].isdigit():
                return ex.Var(n.id)
            raise SchemaError(f"unknown name {n.id!r} in expression")
        if isinstance(n, ast.Subscript):
            if not isinstance(n.value, ast.Name) \
                    or n.value.id not in slot_of:
                raise SchemaError("only input arrays can be subscripted")
            idx = n.slice
            parts = idx.elts if isinstance(idx, ast.Tuple) else (idx,)
            return ex.Load(slot_of[n.value.id], tuple(rec(p) for p in parts))
        if isinstance(n, ast.BinOp):
            op = _AST_BINOP.get(type(n.op))
            if op is None:
                raise SchemaError(f"unsupported operator in {text!r}")
            return ex.BinOp(op, rec(n.left), rec(n.right))
        if isinstance(n, ast.UnaryOp):
            if isinstance(n.op, ast.USub):
                return ex.UnOp("neg", rec(n.operand))
            raise SchemaError(f"unsupported unary operator in {text!r}")
        if isinstance(n, ast.Compare):
            if len(n.ops) != 1:
                raise SchemaError("chained comparisons are not supported")
            op = _AST_CMP.get(type(n.ops[0]))
            if op is None:
                raise SchemaError(f"unsupported comparison in {text!r}")
            return ex.BinOp(op, rec(n.left), rec(n.comparators[0]))
        if isinstance(n, ast.Call):
            if not isinstance(n.func, ast.Name) \
                    or n.func.id not in _CALL_FORMS:
                raise SchemaError(f"unsupported call in {text!r}")
            args = [rec(a) for a in n.args]
            name = n.func.id
            if name == "where":
                if len(args) != 3:
                    raise SchemaError("where takes three arguments")
                return ex.Where(*args)
            if name in ("min", "max"):
                if len(args) != 2:
                    raise SchemaError(f"{name} takes two arguments")
                return ex.BinOp(name, *args)
            if len(args) != 1:
                raise SchemaError(f"{name} takes one argument")
            return ex.UnOp(name, args[0])
        raise SchemaError(f"unsupported syntax in expression {text!r}")

    return rec(tree)

# }}}


# {{{ program files: loading

def _require(mapping: Mapping, key: str, where: str) -> Any:
    if key not in mapping:
        raise SchemaError(f"{where}: missing {key!r}")
    return mapping[key]


def _require_table(mapping: Mapping, key: str, where: str) -> Mapping:
    value = _require(mapping, key, where)
    if not isinstance(value, Mapping):
        raise SchemaError(f"{where}: {key!r} must be a table of names")
    return value


def _parse_tags(spec: Sequence, where: str) -> tuple:
    axes = []
    for axis_spec in spec:
        tags = []
        for t in axis_spec:
            tags.append(AxisTag(str(_require(t, "key", where)),
                                str(_require(t, "value", where))))
        axes.append(tuple(tags))
    return tuple(axes)


class _NodeTableLoader:
    """Builds nodes from one ``nodes`` table, definition before use."""

    def __init__(self, default_dtype: DType,
                 functions: Mapping[str, FunctionDefinition],
                 where: str) -> None:
        self.default_dtype = default_dtype
        self.functions = functions
        self.where = where
        self.nodes: dict[str, Array] = {}
        self.calls: dict[str, Call] = {}

    def ref(self, name: str) -> Array:
        if not isinstance(name, str) or name not in self.nodes:
            raise SchemaError(f"{self.where}: reference to unknown node "
                              f"{name!r}")
        return self.nodes[name]

    def dtype(self, spec: Mapping) -> DType:
        try:
            return as_dtype(spec["dtype"]) if "dtype" in spec \
                else self.default_dtype
        except Exception as err:
            raise SchemaError(f"{self.where}: bad dtype: {err}") from None

    def load_table(self, table: Mapping[str, Mapping],
                   tags: Mapping[str, Sequence] | None = None,
                   materialized: Sequence[str] = ()) -> None:
        if not isinstance(table, Mapping):
            raise SchemaError(f"{self.where}: nodes must be a table")
        tags = tags or {}
        flagged = set(materialized)
        for name, spec in table.items():
            if not isinstance(spec, Mapping):
                raise SchemaError(f"{self.where}: node {name!r} must be a "
                                  f"table")
            try:
                node = self._build(name, spec)
                if name in tags:
                    node = retag(node, _parse_tags(tags[name], self.where))
                if name in flagged:
                    node = set_materialized(node, True)
            except (LazeError, TypeError, ValueError) as err:
                raise SchemaError(
                        f"{self.where}: node {name!r}: {err}") from None
            self.nodes[name] = node
        unknown = (set(tags) | flagged) - set(self.nodes)
        if unknown:
            raise SchemaError(f"{self.where}: tags or materialized flags "
                              f"for unknown nodes {sorted(unknown)}")

    def _build(self, name: str, spec: Mapping) -> Array:
        kind = _require(spec, "kind", f"{self.where}: node {name!r}")
        if kind == "placeholder":
            shape = tuple(_require(spec, "shape", name))
            return Placeholder(spec.get("name", name), shape,
                               self.dtype(spec))
        if kind == "data":
            value = np.asarray(_require(spec, "value", name))
            if "dtype" in spec:
                value = value.astype(as_dtype(spec["dtype"]).to_numpy)
            elif value.dtype.kind == "f":
                value = value.astype(np.float64)
            return Data(value)
        if kind == "expression":
            inputs = [self.ref(r) for r in _require(spec, "inputs", name)]
            slot_of = {r: k
                       for k, r in enumerate(_require(spec, "inputs", name))}
            expression = parse_expression(
                    str(_require(spec, "expr", name)), slot_of)
            return IndexLambda(expression, tuple(inputs),
                               tuple(_require(spec, "shape", name)))
        if kind == "reshape":
            return Reshape(self.ref(_require(spec, "array", name)),
                           tuple(_require(spec, "shape", name)))
        if kind == "einsum":
            return Einsum(str(_require(spec, "subscripts", name)),
                          tuple(self.ref(a)
                                for a in _require(spec, "args", name)))
        if kind == "concatenate":
            return Concatenate(tuple(self.ref(a) for a in
                                     _require(spec, "arrays", name)),
                               int(_require(spec, "axis", name)))
        if kind == "stack":
            return Stack(tuple(self.ref(a) for a in
                               _require(spec, "arrays", name)),
                         int(_require(spec, "axis", name)))
        if kind == "index":
            selectors = []
            for s in _require(spec, "selectors", name):
                if isinstance(s, int):
                    selectors.append(s)
                elif isinstance(s, Mapping) and "slice" in s:
                    start, stop, step = s["slice"]
                    selectors.append(Slice(start, stop, step))
                elif isinstance(s, Mapping) and "array" in s:
                    selectors.append(self.ref(s["array"]))
                else:
                    raise SchemaError(f"node {name!r}: bad selector {s!r}")
            return Indexing(self.ref(_require(spec, "array", name)),
                            tuple(selectors))
        if kind == "receive":
            return Receive(int(_require(spec, "source", name)),
                           int(_require(spec, "tag", name)),
                           tuple(_require(spec, "shape", name)),
                           self.dtype(spec))
        if kind == "send":
            data = self.ref(_require(spec, "data", name))
            carrier = self.ref(_require(spec, "stapled_to", name))
            return SendWrapper(carrier,
                               Send(data, int(_require(spec, "dest", name)),
                                    int(_require(spec, "tag", name))))
        if kind == "call":
            fname = _require(spec, "function", name)
            if fname not in self.functions:
                raise SchemaError(f"node {name!r}: unknown function "
                                  f"{fname!r}")
            args = {pname: self.ref(r)
                    for pname, r in _require(spec, "args", name).items()}
            call = Call(self.functions[fname], tuple(sorted(args.items())))
            self.calls[name] = call
            # the call node stands for its first result; further results
            # reference it through "result" nodes
            returns = self.functions[fname].returns
            return CallResult(call, returns[0][0])
        if kind == "result":
            cname = _require(spec, "call", name)
            if cname in self.calls:
                call = self.calls[cname]
            elif cname in self.nodes \
                    and isinstance(self.nodes[cname], CallResult):
                call = self.nodes[cname].call
            else:
                raise SchemaError(f"node {name!r}: unknown call {cname!r}")
            return CallResult(call, str(_require(spec, "result", name)))
        raise SchemaError(f"node {name!r}: unknown kind {kind!r}")


def _load_functions(spec: Mapping, default_dtype: DType,
                    where: str) -> dict[str, FunctionDefinition]:
    functions: dict[str, FunctionDefinition] = {}
    if not isinstance(spec, Mapping):
        raise SchemaError(f"{where}: 'functions' must be a table")
    for fname, fspec in spec.items():
        loader = _NodeTableLoader(default_dtype, functions,
                                  f"{where}: function {fname!r}")
        params = _require_table(fspec, "parameters", fname)
        param_table = {
                pname: {"kind": "placeholder", **pspec}
                for pname, pspec in params.items()}
        loader.load_table({**param_table,
                           **_require_table(fspec, "nodes", fname)})
        returns = {rname: loader.ref(r)
                   for rname, r in
                   _require_table(fspec, "returns", fname).items()}
        functions[fname] = FunctionDefinition(
                str(fspec.get("name", fname)),
                tuple(loader.nodes[p] for p in params),
                tuple(sorted(returns.items())))
    return functions


def load_single_graph(doc: Mapping, default_dtype: DType,
                      where: str) -> tuple[Graph, dict[str, Array]]:
    functions = _load_functions(doc.get("functions", {}), default_dtype,
                                where)
    loader = _NodeTableLoader(default_dtype, functions, where)
    loader.load_table(_require_table(doc, "nodes", where),
                      tags=doc.get("tags"),
                      materialized=doc.get("materialized", ()))
    outputs = {str(oname): loader.ref(r)
               for oname, r in _require_table(doc, "outputs", where).items()}
    if not outputs:
        raise SchemaError(f"{where}: outputs must not be empty")
    return Graph(outputs), loader.nodes


def load_program_file(path: str, default_dtype: DType,
                      ) -> tuple[list[Graph], list[dict], Mapping]:
    """Returns rank graphs (one entry when single-process), bindings
    per rank, and the raw document."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as err:
        raise SchemaError(f"cannot read {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path} is not valid JSON: {err}") from None
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{path}: top level must be a table")

    if "ranks" in doc:
        if not isinstance(doc["ranks"], Sequence) \
                or isinstance(doc["ranks"], (str, bytes)):
            raise SchemaError(f"{path}: 'ranks' must be a list of tables")
        graphs = []
        bindings = []
        for rank, rdoc in enumerate(doc["ranks"]):
            if not isinstance(rdoc, Mapping):
                raise SchemaError(f"{path}[rank {rank}] must be a table")
            g, _ = load_single_graph(rdoc, default_dtype,
                                     f"{path}[rank {rank}]")
            graphs.append(g)
            bindings.append(rdoc.get("bindings", {}))
        return graphs, bindings, doc

    g, _ = load_single_graph(doc, default_dtype, path)
    return [g], [doc.get("bindings", {})], doc

# }}}


# {{{ bindings

def materialize_bindings(spec: Mapping, graph: Graph,
                         seed: int) -> dict[str, np.ndarray]:
    """Turn binding specs into arrays; missing inputs get seeded noise."""
    placeholders = {n.name: n for n in topo_order(graph)
                    if isinstance(n, Placeholder)}
    out: dict[str, np.ndarray] = {}
    for name, value in spec.items():
        if name not in placeholders:
            raise SchemaError(f"binding {name!r} matches no input")
        out[name] = _binding_value(name, value, placeholders[name])
    for k, (name, node) in enumerate(sorted(placeholders.items())):
        if name in out:
            continue
        rng = np.random.default_rng(seed + k)
        if node.dtype.is_integral:
            top = max((min(node.shape) if node.shape else 2), 2)
            out[name] = rng.integers(0, top, node.shape).astype(
                    node.dtype.to_numpy)
        else:
            out[name] = rng.standard_normal(node.shape).astype(
                    node.dtype.to_numpy)
    return out


def _binding_value(name: str, value: Any,
                   node: Placeholder) -> np.ndarray:
    if isinstance(value, Mapping):
        if "linspace" in value:
            start, stop, num = value["linspace"]
            arr = np.linspace(float(start), float(stop), int(num))
        elif "seeded_random" in value:
            seed, shape = value["seeded_random"]
            arr = np.random.default_rng(int(seed)).standard_normal(
                    tuple(shape))
        elif "arange" in value:
            (stop,) = value["arange"]
            arr = np.arange(int(stop))
        elif "full" in value:
            shape, fill = value["full"]
            arr = np.full(tuple(shape), fill)
        else:
            raise SchemaError(f"binding {name!r}: unknown generator "
                              f"{sorted(value)!r}")
    else:
        arr = np.asarray(value)
    arr = arr.astype(node.dtype.to_numpy)
    if arr.shape != node.shape:
        if arr.size == int(np.prod(node.shape, dtype=np.int64)):
            arr = arr.reshape(node.shape)
        else:
            raise SchemaError(
                    f"binding {name!r} has shape {arr.shape}, input wants "
                    f"{node.shape}")
    return arr

# }}}


# {{{ program files: saving

def graph_to_doc(graph: Graph, name: str = "program") -> dict:
    """Serialize a graph; loading the result reproduces it exactly."""
    node_name: dict[Node, str] = {}
    fdef_name: dict[FunctionDefinition, str] = {}
    call_name: dict[Call, str] = {}
    nodes: dict[str, dict] = {}
    functions: dict[str, dict] = {}
    tags: dict[str, list] = {}
    flags: list[str] = []
    counter = {"n": 0, "d": 0, "f": 0, "c": 0}

    def fresh(prefix: str) -> str:
        label = f"_{prefix}{counter[prefix]}"
        counter[prefix] += 1
        return label

    def fn_of(fdef: FunctionDefinition) -> str:
        if fdef in fdef_name:
            return fdef_name[fdef]
        label = fresh("f")
        fdef_name[fdef] = label
        body: dict[str, dict] = {}
        body_names: dict[Node, str] = {}
        params = {}
        for p in fdef.parameters:
            body_names[p] = p.name
            params[p.name] = {"shape": list(p.shape),
                              "dtype": p.dtype.value}
        body_counter = [0]

        def body_name(n: Array) -> str:
            if n in body_names:
                return body_names[n]
            label = f"_n{body_counter[0]}"
            body_counter[0] += 1
            body_names[n] = label
            body[label] = node_spec(n, body_name)
            return label

        returns = {rname: body_name(rnode)
                   for rname, rnode in fdef.returns}
        functions[label] = {"name": fdef.name, "parameters": params,
                            "nodes": body, "returns": returns}
        return label

    def node_spec(n: Array, ref: Callable[[Array], str]) -> dict:
        if isinstance(n, Placeholder):
            return {"kind": "placeholder", "shape": list(n.shape),
                    "dtype": n.dtype.value, "name": n.name}
        if isinstance(n, Data):
            return {"kind": "data", "value": n.data.tolist(),
                    "dtype": n.dtype.value}
        if isinstance(n, IndexLambda):
            input_names = [ref(b) for b in n.bindings]
            return {"kind": "expression", "shape": list(n.shape),
                    "inputs": input_names,
                    "expr": ex.to_str(
                            n.expression,
                            ref_name=lambda s: input_names[s])}
        if isinstance(n, Reshape):
            return {"kind": "reshape", "array": ref(n.array),
                    "shape": list(n.shape)}
        from .adfg import Einsum
        if isinstance(n, Einsum):
            return {"kind": "einsum", "subscripts": n.subscripts,
                    "args": [ref(a) for a in n.args]}
        if isinstance(n, Concatenate):
            return {"kind": "concatenate", "axis": n.axis,
                    "arrays": [ref(a) for a in n.arrays]}
        if isinstance(n, Stack):
            return {"kind": "stack", "axis": n.axis,
                    "arrays": [ref(a) for a in n.arrays]}
        if isinstance(n, Indexing):
            selectors: list = []
            for s in n.selectors:
                if isinstance(s, int):
                    selectors.append(s)
                elif isinstance(s, Slice):
                    selectors.append({"slice": [s.start, s.stop, s.step]})
                else:
                    selectors.append({"array": ref(s)})
            return {"kind": "index", "array": ref(n.array),
                    "selectors": selectors}
        if isinstance(n, Receive):
            return {"kind": "receive", "source": n.source, "tag": n.tag,
                    "shape": list(n.shape), "dtype": n.dtype.value}
        if isinstance(n, SendWrapper):
            return {"kind": "send", "data": ref(n.send.data),
                    "dest": n.send.dest, "tag": n.send.tag,
                    "stapled_to": ref(n.passthrough)}
        if isinstance(n, CallResult):
            if ref is not name_of:
                raise LazeError("cannot serialize calls nested inside "
                                "function bodies")
            call = n.call
            first_result = call.function.returns[0][0]
            if call not in call_name:
                call_spec = {
                        "kind": "call", "function": fn_of(call.function),
                        "args": {pname: ref(a) for pname, a in call.args}}
                if n.result == first_result:
                    # this node doubles as the call entry
                    call_name[call] = node_name[n]
                    return call_spec
                # synthesize a carrier entry for the call itself
                call_name[call] = fresh("c")
                nodes[call_name[call]] = call_spec
            return {"kind": "result", "call": call_name[call],
                    "result": n.result}
        raise LazeError(f"cannot serialize node kind {type(n).__name__}")

    def name_of(n: Array) -> str:
        if n in node_name:
            return node_name[n]
        if isinstance(n, Placeholder):
            label = n.name
        elif isinstance(n, Data):
            label = fresh("d")
        else:
            label = fresh("n")
        node_name[n] = label
        nodes[label] = node_spec(n, name_of)
        if any(n.axis_tags):
            tags[label] = [
                    [{"key": t.key, "value": t.value} for t in axis]
                    for axis in n.axis_tags]
        if n.materialized:
            flags.append(label)
        return label

    for n in topo_order(graph):
        if isinstance(n, Array):
            name_of(n)

    outputs = {oname: name_of(onode) for oname, onode in graph.outputs}
    doc: dict = {"name": name, "nodes": nodes, "outputs": outputs}
    if functions:
        doc["functions"] = functions
    if tags:
        doc["tags"] = tags
    if flags:
        doc["materialized"] = sorted(set(flags))
    return doc

# }}}


# {{{ dot output

def graph_to_dot(graph: Graph) -> str:
    order = [n for n in topo_order(graph)]
    idx = {n: k for k, n in enumerate(order)}
    lines = ["digraph adfg {", "    rankdir=BT;"]
    for n in order:
        kind = type(n).__name__
        if isinstance(n, Array):
            extra = f"\\n{n.dtype.value}{list(n.shape)}"
            if n.materialized:
                extra += "\\n[materialized]"
            if isinstance(n, Placeholder):
                extra = f"\\n{n.name}" + extra
        else:
            extra = ""
        shape = "box" if isinstance(n, Array) and n.materialized \
            else "ellipse"
        lines.append(f'    n{idx[n]} [label="{kind}{extra}", '
                     f'shape={shape}];')
    for n in order:
        for c in n.traversal_children():
            if c in idx:
                lines.append(f"    n{idx[c]} -> n{idx[n]};")
    for name, node in graph.outputs:
        lines.append(f'    out_{name} [label="{name}", shape=plaintext];')
        lines.append(f"    n{idx[node]} -> out_{name};")
    lines.append("}")
    return "\n".join(lines)

# }}}


# {{{ commands

def _config_from(args: argparse.Namespace) -> PassConfig:
    return PassConfig(
            concatenate_calls=not args.no_concat,
            fuse_loops=not args.no_fusion,
            contract_arrays=not args.no_contraction)


def _print_arrays(values: Mapping[str, np.ndarray],
                  prefix: str = "") -> None:
    for name in sorted(values):
        arr = np.asarray(values[name])
        print(f"{prefix}{name} = {arr.tolist()}")


def _single(graphs: list[Graph], path: str) -> Graph:
    if len(graphs) != 1:
        raise SchemaError(f"{path} is a multi-rank program; use "
                          f"run-distributed")
    return graphs[0]


def _cmd_dump_adfg(args) -> int:
    graphs, _, _ = load_program_file(args.program, args.dtype)
    print(graph_to_dot(_single(graphs, args.program)))
    return 0


def _cmd_stats(args) -> int:
    graphs, _, _ = load_program_file(args.program, args.dtype)
    graph = _single(graphs, args.program)
    config = _config_from(args)
    print(f"before materialize: {cost_report(graph).as_text()}")
    after = materialize(graph, config.materialization_override)
    print(f"after materialize:  {cost_report(after).as_text()}")
    return 0


def _cmd_transform(args) -> int:
    graphs, _, doc = load_program_file(args.program, args.dtype)
    graph = _single(graphs, args.program)
    log = PassLog()
    transformed = apply_graph_passes(graph, _config_from(args), log)
    out_doc = graph_to_doc(transformed, name=doc.get("name", "program"))
    if "bindings" in doc:
        out_doc["bindings"] = doc["bindings"]
    text = json.dumps(out_doc, indent=2)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    if args.explain:
        for line in log.lines:
            print(f"# {line}", file=sys.stderr)
    return 0


def _cmd_lower(args) -> int:
    graphs, _, _ = load_program_file(args.program, args.dtype)
    graph = _single(graphs, args.program)
    config = _config_from(args)
    log = PassLog()
    transformed = apply_graph_passes(graph, config, log)
    program = lower(transformed, config, log)
    print(program_text(program))
    if args.explain:
        for line in log.lines:
            print(f"# {line}", file=sys.stderr)
    return 0


def _cmd_optimize(args) -> int:
    graphs, _, _ = load_program_file(args.program, args.dtype)
    compiled = compile_graph(_single(graphs, args.program),
                             _config_from(args))
    print(compiled.program_text)
    if args.explain:
        for line in compiled.log.lines:
            print(f"# {line}", file=sys.stderr)
    return 0


def _cmd_codegen(args) -> int:
    graphs, _, _ = load_program_file(args.program, args.dtype)
    compiled = compile_graph(_single(graphs, args.program),
                             _config_from(args))
    print(compiled.kernel_source)
    return 0


def _cmd_run(args) -> int:
    graphs, bindings_spec, _ = load_program_file(args.program, args.dtype)
    graph = _single(graphs, args.program)
    compiled = compile_graph(graph, _config_from(args))
    bindings = materialize_bindings(bindings_spec[0], graph, args.seed)
    results = compiled.execute(bindings)
    _print_arrays(results)
    if args.explain:
        for line in compiled.log.lines:
            print(f"# {line}", file=sys.stderr)
        print(compiled.timer.as_text(), file=sys.stderr)
    return 0


def _cmd_oracle(args) -> int:
    graphs, bindings_spec, _ = load_program_file(args.program, args.dtype)
    if len(graphs) == 1:
        graph = graphs[0]
        bindings = materialize_bindings(bindings_spec[0], graph,
                                        args.seed)
        values = {name: eager_eval(node, bindings)
                  for name, node in graph.outputs}
        _print_arrays(values)
        return 0
    all_bindings = [
            materialize_bindings(spec, graph, args.seed + 101 * r)
            for r, (graph, spec) in enumerate(zip(graphs, bindings_spec))]
    results = eager_eval_distributed(graphs, all_bindings)
    for rank, values in enumerate(results):
        _print_arrays(values, prefix=f"rank{rank}.")
    return 0


def _cmd_run_distributed(args) -> int:
    graphs, bindings_spec, _ = load_program_file(args.program, args.dtype)
    if len(graphs) < 2:
        raise SchemaError(f"{args.program} has no 'ranks' table")
    if args.ranks is not None and args.ranks != len(graphs):
        raise SchemaError(f"{args.program} defines {len(graphs)} ranks, "
                          f"--ranks asked for {args.ranks}")
    plans = partition(graphs, assignment=args.slot_assignment)
    executor = DistributedExecutor(plans, _config_from(args),
                                   seed=args.seed)
    all_bindings = [
            materialize_bindings(spec, graph, args.seed + 101 * r)
            for r, (graph, spec) in enumerate(zip(graphs, bindings_spec))]
    results = executor.execute(all_bindings)
    for rank, values in enumerate(results):
        _print_arrays(values, prefix=f"rank{rank}.")
    if args.explain:
        plan = extract_comm_graph(graphs)
        print(f"# batches: {plan.num_batches}", file=sys.stderr)
        for line in executor.trace:
            print(f"# {line}", file=sys.stderr)
        print(f"# peak live bytes: {executor.peak_live_bytes}",
              file=sys.stderr)
    return 0

# }}}


def _dtype_argument(text: str) -> DType:
    try:
        return as_dtype(text)
    except Exception:
        raise argparse.ArgumentTypeError(
                f"unknown element type {text!r}") from None


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
            prog="laze",
            description="compile and run lazily captured array programs")
    parser.add_argument("--dtype", type=_dtype_argument, default=DType.F64,
                        help="element type for inputs that do not name one")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for generated bindings and the "
                             "distributed schedule")
    parser.add_argument("--explain", action="store_true",
                        help="report pass decisions and timings on stderr")
    parser.add_argument("--no-fusion", action="store_true",
                        help="skip loop fusion")
    parser.add_argument("--no-contraction", action="store_true",
                        help="skip array contraction")
    parser.add_argument("--no-concat", action="store_true",
                        help="skip call concatenation")
    parser.add_argument("--slot-assignment",
                        choices=["latest", "earliest"], default="latest",
                        help="where between message batches work lands")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("program", help="JSON program file")
        p.set_defaults(fn=fn)
        return p

    add("dump-adfg", _cmd_dump_adfg, "print the dataflow graph as DOT")
    t = add("transform", _cmd_transform,
            "apply the graph passes and re-serialize")
    t.add_argument("-o", "--output", help="write here instead of stdout")
    add("stats", _cmd_stats,
        "evaluation cost before and after materialization")
    add("lower", _cmd_lower, "print the loop program before its passes")
    add("optimize", _cmd_optimize,
        "print the loop program after its passes")
    add("codegen", _cmd_codegen, "print the emitted kernels")
    add("run", _cmd_run, "compile and execute")
    add("oracle", _cmd_oracle, "evaluate the reference semantics")
    rd = add("run-distributed", _cmd_run_distributed,
             "partition a multi-rank program and run all ranks")
    rd.add_argument("--ranks", type=int, default=None,
                    help="expected number of ranks")

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SchemaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except LazeError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
