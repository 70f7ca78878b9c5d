"""User-facing array contexts.

An :class:`ArrayContext` hands out arrays and numpy-flavored operations
on them.  The lazy context records every operation as a dataflow-graph
node and performs no numeric work until :func:`freeze` or a compiled
function forces evaluation through the full pipeline.  The eager
context executes each operation immediately with numpy and serves as
the behavioral reference.

:func:`eager_eval` interprets a graph directly with numpy.  It is the
oracle against which every transformed or compiled execution is
checked, so it is kept deliberately free of the pipeline's machinery.
"""

from __future__ import annotations

import inspect
import logging
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import adfg, expr as ex
from .adfg import (
    Array, Call, CallResult, Concatenate, Data, DType, Einsum,
    FunctionDefinition, Graph, IndexLambda, Indexing, Placeholder, Receive,
    Reshape, Send, SendWrapper, Slice, Stack, broadcast_shapes, index_name,
)
from .errors import (
    BadSubscript, BindingMismatch, CommunicationInSingleProcessGraph,
    LazeError, OutOfBoundsIndex, ShapeMismatch, SignatureUnsupported,
    TracingError, UnboundPlaceholder,
)

logger = logging.getLogger(__name__)

EAGER = "eager"
LAZY = "lazy"

_EINSUM_LETTERS = "abcdefgh"


# {{{ eager evaluation (the oracle)

ReceiveResolver = Callable[[Receive], np.ndarray]


def eager_eval(
        node: Array | Graph,
        bindings: Mapping[str, np.ndarray] | None = None,
        *,
        receive_resolver: ReceiveResolver | None = None,
        _memo: dict | None = None,
        ) -> np.ndarray | dict[str, np.ndarray]:
    """Evaluate a node or a whole graph with numpy.

    ``bindings`` supplies placeholder values by name.  Communication
    nodes are rejected unless ``receive_resolver`` maps them to values
    (distributed oracles do).  The result of a graph is a dict keyed
    like its outputs.
    """
    bindings = bindings or {}
    memo: dict = {} if _memo is None else _memo

    if isinstance(node, Graph):
        return {name: eager_eval(out, bindings,
                                 receive_resolver=receive_resolver,
                                 _memo=memo)
                for name, out in node.outputs}

    def rec(n: Array) -> np.ndarray:
        if n in memo:
            return memo[n]
        value = _eval_node(n, rec, bindings, receive_resolver, memo)
        value = np.asarray(value)
        if value.shape != n.shape:
            value = np.broadcast_to(value, n.shape)
        value = value.astype(n.dtype.to_numpy, copy=False)
        memo[n] = value
        return value

    return rec(node)


def _eval_node(n: Array, rec, bindings, receive_resolver, memo) -> np.ndarray:
    if isinstance(n, Data):
        return n.data
    if isinstance(n, Placeholder):
        if n.name not in bindings:
            raise UnboundPlaceholder(f"no value bound for placeholder "
                                     f"{n.name!r}")
        value = np.asarray(bindings[n.name])
        if value.shape != n.shape:
            raise BindingMismatch(
                    f"placeholder {n.name!r} expects shape {n.shape}, "
                    f"bound value has {value.shape}")
        if DType.from_numpy(value.dtype) != n.dtype:
            raise BindingMismatch(
                    f"placeholder {n.name!r} expects dtype {n.dtype.value}, "
                    f"bound value has {value.dtype}")
        return value
    if isinstance(n, Receive):
        if receive_resolver is None:
            raise CommunicationInSingleProcessGraph(
                    f"receive (source={n.source}, tag={n.tag}) in a "
                    f"single-process evaluation")
        return receive_resolver(n)
    if isinstance(n, SendWrapper):
        return rec(n.passthrough)
    if isinstance(n, IndexLambda):
        inputs = [rec(b) for b in n.bindings]

        def load(l: ex.Load, idx: tuple) -> np.ndarray:
            return inputs[l.ref][tuple(idx)] if idx else inputs[l.ref][()]

        env = {index_name(k): grid
               for k, grid in enumerate(np.indices(n.shape))}
        return ex.evaluate(n.expression, env, load)
    if isinstance(n, Reshape):
        return np.reshape(rec(n.array), n.newshape)
    if isinstance(n, Indexing):
        selectors = []
        for axis, s in enumerate(n.selectors):
            if isinstance(s, Array):
                idx = rec(s)
                extent = n.array.shape[axis]
                if idx.size and (np.any(idx < 0) or np.any(idx >= extent)):
                    raise OutOfBoundsIndex(
                            f"index array on axis {axis} leaves "
                            f"[0, {extent})")
                selectors.append(idx)
            elif isinstance(s, Slice):
                selectors.append(slice(s.start, s.stop, s.step))
            else:
                selectors.append(s)
        return rec(n.array)[tuple(selectors)]
    if isinstance(n, Einsum):
        return np.einsum(n.subscripts, *[rec(a) for a in n.args])
    if isinstance(n, Concatenate):
        return np.concatenate([rec(a) for a in n.arrays], axis=n.axis)
    if isinstance(n, Stack):
        return np.stack([rec(a) for a in n.arrays], axis=n.axis)
    if isinstance(n, CallResult):
        call = n.call
        if call not in memo:
            inner = {name: rec(a) for name, a in call.args}
            memo[call] = {
                    name: eager_eval(result, inner)
                    for name, result in call.function.returns}
        return memo[call][n.result]
    raise LazeError(f"cannot evaluate node of type {type(n).__name__}")

# }}}


# {{{ lazy array wrapper

class LazyArray:
    """An unevaluated array: a handle on a graph node.

    Supports the usual arithmetic, comparison, and subscript operators;
    every operation appends nodes to the graph and performs no numeric
    work.
    """

    def __init__(self, actx: "ArrayContext", node: Array) -> None:
        self.actx = actx
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.shape

    @property
    def dtype(self) -> DType:
        return self.node.dtype

    def __repr__(self) -> str:
        return (f"LazyArray({type(self.node).__name__}, "
                f"shape={self.node.shape}, dtype={self.node.dtype.value})")

    def tagged(self, axis: int, key: str, value: str) -> "LazyArray":
        """A copy of this array with one more tag on *axis*."""
        tags = list(self.node.axis_tags)
        tags[axis] = adfg.merge_axis_tags(
                tags[axis], (adfg.AxisTag(key, value),))
        return LazyArray(self.actx, adfg.retag(self.node, tuple(tags)))

    def reshape(self, *shape) -> "LazyArray":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.actx.np.reshape(self, shape)

    # {{{ operators

    def _bin(self, other, op: str, reflected: bool = False) -> "LazyArray":
        lhs, rhs = (other, self) if reflected else (self, other)
        return self.actx._binary_op(op, lhs, rhs)

    def __add__(self, other): return self._bin(other, "add")
    def __radd__(self, other): return self._bin(other, "add", True)
    def __sub__(self, other): return self._bin(other, "sub")
    def __rsub__(self, other): return self._bin(other, "sub", True)
    def __mul__(self, other): return self._bin(other, "mul")
    def __rmul__(self, other): return self._bin(other, "mul", True)
    def __truediv__(self, other): return self._bin(other, "truediv")
    def __rtruediv__(self, other): return self._bin(other, "truediv", True)
    def __pow__(self, other): return self._bin(other, "pow")
    def __rpow__(self, other): return self._bin(other, "pow", True)
    def __mod__(self, other): return self._bin(other, "mod")
    def __floordiv__(self, other): return self._bin(other, "floordiv")
    def __lt__(self, other): return self._bin(other, "lt")
    def __le__(self, other): return self._bin(other, "le")
    def __gt__(self, other): return self._bin(other, "gt")
    def __ge__(self, other): return self._bin(other, "ge")

    def __neg__(self): return self.actx._unary_op("neg", self)
    def __abs__(self): return self.actx._unary_op("abs", self)

    # }}}

    def __getitem__(self, selection) -> "LazyArray":
        if not isinstance(selection, tuple):
            selection = (selection,)
        shape = self.node.shape
        if len(selection) > len(shape):
            raise BadSubscript(f"{len(selection)} subscripts for rank "
                               f"{len(shape)}")
        selection = selection + tuple(
                slice(None) for _ in range(len(shape) - len(selection)))
        selectors: list = []
        for axis, sel in enumerate(selection):
            extent = shape[axis]
            if isinstance(sel, (int, np.integer)) and not isinstance(sel, bool):
                sel = int(sel)
                if sel < 0:
                    sel += extent
                selectors.append(sel)
            elif isinstance(sel, slice):
                start, stop, step = sel.indices(extent)
                if step < 1:
                    raise BadSubscript("only positive slice steps are "
                                       "supported")
                selectors.append(Slice(start, max(start, stop), step))
            elif isinstance(sel, LazyArray):
                selectors.append(sel.node)
            else:
                raise BadSubscript(f"unsupported subscript: {sel!r}")
        return LazyArray(self.actx,
                         Indexing(self.node, tuple(selectors)))

# }}}


# {{{ operation namespace

class _OpNamespace:
    """Numpy-flavored functions bound to one context."""

    def __init__(self, actx: "ArrayContext") -> None:
        self._actx = actx

    # elementwise binary
    def add(self, a, b): return self._actx._binary_op("add", a, b)
    def subtract(self, a, b): return self._actx._binary_op("sub", a, b)
    def multiply(self, a, b): return self._actx._binary_op("mul", a, b)
    def divide(self, a, b): return self._actx._binary_op("truediv", a, b)
    def power(self, a, b): return self._actx._binary_op("pow", a, b)
    def maximum(self, a, b): return self._actx._binary_op("max", a, b)
    def minimum(self, a, b): return self._actx._binary_op("min", a, b)
    def greater(self, a, b): return self._actx._binary_op("gt", a, b)
    def greater_equal(self, a, b): return self._actx._binary_op("ge", a, b)
    def less(self, a, b): return self._actx._binary_op("lt", a, b)
    def less_equal(self, a, b): return self._actx._binary_op("le", a, b)
    def equal(self, a, b): return self._actx._binary_op("eq", a, b)
    def not_equal(self, a, b): return self._actx._binary_op("ne", a, b)

    # elementwise unary
    def negative(self, a): return self._actx._unary_op("neg", a)
    def abs(self, a): return self._actx._unary_op("abs", a)
    def sqrt(self, a): return self._actx._unary_op("sqrt", a)
    def exp(self, a): return self._actx._unary_op("exp", a)
    def log(self, a): return self._actx._unary_op("log", a)

    def where(self, cond, a, b):
        return self._actx._where(cond, a, b)

    # structural
    def reshape(self, a, newshape):
        return self._actx._reshape(a, newshape)

    def concatenate(self, arrays, axis: int = 0):
        return self._actx._concatenate(arrays, axis)

    def stack(self, arrays, axis: int = 0):
        return self._actx._stack(arrays, axis)

    def einsum(self, subscripts: str, *args):
        return self._actx._einsum(subscripts, args)

    def sum(self, a, axis=None):
        return self._actx._sum(a, axis)

# }}}


# {{{ array context

class ArrayContext:
    """Factory and evaluation entry point for arrays.

    ``mode`` selects lazy graph building (``"lazy"``, the default) or
    immediate numpy execution (``"eager"``).
    """

    def __init__(self, mode: str = LAZY) -> None:
        if mode not in (LAZY, EAGER):
            raise LazeError(f"unknown mode: {mode!r}")
        self.mode = mode
        self.np = _OpNamespace(self)
        from .graph_passes import PassConfig
        self.pass_config = PassConfig()
        self._outlined: dict[tuple, FunctionDefinition] = {}

    # {{{ array creation

    def from_numpy(self, value) -> Any:
        value = np.asarray(value)
        DType.from_numpy(value.dtype)  # reject unsupported dtypes early
        if self.mode == EAGER:
            return value.copy()
        return LazyArray(self, Data(value))

    def placeholder(self, name: str, shape: Sequence[int],
                    dtype: DType = DType.F64) -> LazyArray:
        if self.mode == EAGER:
            raise LazeError("eager contexts have no placeholders")
        return LazyArray(self, Placeholder(name, tuple(shape), dtype))

    def to_numpy(self, value) -> np.ndarray:
        if isinstance(value, LazyArray):
            return freeze(self, value)
        return np.asarray(value)

    # }}}

    # {{{ op construction

    def _as_operand(self, value) -> tuple[Array | None, ex.Expr | None]:
        """Split an operand into (node, None) or (None, literal expr)."""
        if isinstance(value, LazyArray):
            return value.node, None
        if isinstance(value, Array):
            return value, None
        if isinstance(value, (bool, int, float, np.bool_, np.integer,
                              np.floating)):
            return None, ex.Const(value)
        if isinstance(value, np.ndarray):
            if value.ndim == 0:
                return None, ex.Const(value[()])
            return Data(value), None
        raise LazeError(f"cannot use {type(value).__name__} as an operand")

    def _load_expr(self, slot: int, in_shape: tuple[int, ...],
                   out_shape: tuple[int, ...]) -> ex.Expr:
        # trailing-aligned broadcast access
        offset = len(out_shape) - len(in_shape)
        idx = tuple(
                ex.Var(index_name(offset + j))
                if in_shape[j] == out_shape[offset + j] else ex.Const(0)
                for j in range(len(in_shape)))
        return ex.Load(slot, idx)

    def _pointwise(self, build: Callable[..., ex.Expr], operands) -> LazyArray:
        nodes: list[Array] = []
        sides: list = []
        for value in operands:
            node, lit = self._as_operand(value)
            if node is not None:
                sides.append(("node", node, len(nodes)))
                nodes.append(node)
            else:
                sides.append(("lit", lit, None))
        if not nodes:
            raise LazeError("at least one operand must be an array")
        out_shape = broadcast_shapes([n.shape for n in nodes])
        parts = [
                self._load_expr(slot, node_or_lit.shape, out_shape)
                if kind == "node" else node_or_lit
                for kind, node_or_lit, slot in sides]
        return LazyArray(self, IndexLambda(build(*parts), tuple(nodes),
                                           out_shape))

    def _binary_op(self, op: str, a, b):
        if self.mode == EAGER:
            return ex._BINARY_FN[op](self._eager_value(a),
                                     self._eager_value(b))
        return self._pointwise(lambda x, y: ex.BinOp(op, x, y), (a, b))

    def _unary_op(self, op: str, a):
        if self.mode == EAGER:
            return ex._UNARY_FN[op](self._eager_value(a))
        return self._pointwise(lambda x: ex.UnOp(op, x), (a,))

    def _where(self, cond, a, b):
        if self.mode == EAGER:
            return np.where(self._eager_value(cond), self._eager_value(a),
                            self._eager_value(b))
        return self._pointwise(lambda c, x, y: ex.Where(c, x, y),
                               (cond, a, b))

    def _eager_value(self, value) -> np.ndarray:
        if isinstance(value, LazyArray):
            raise LazeError("lazy array passed to an eager context")
        return value

    def _node_of(self, value) -> Array:
        node, lit = self._as_operand(value)
        if node is None:
            node = Data(np.asarray(lit.value))
        return node

    def _reshape(self, a, newshape):
        if self.mode == EAGER:
            return np.reshape(self._eager_value(a), newshape)
        node = self._node_of(a)
        newshape = _resolve_reshape(node.shape, newshape)
        return LazyArray(self, Reshape(node, newshape))

    def _concatenate(self, arrays, axis: int):
        if self.mode == EAGER:
            return np.concatenate([self._eager_value(a) for a in arrays],
                                  axis=axis)
        return LazyArray(self, Concatenate(
                tuple(self._node_of(a) for a in arrays), axis))

    def _stack(self, arrays, axis: int):
        if self.mode == EAGER:
            return np.stack([self._eager_value(a) for a in arrays], axis=axis)
        return LazyArray(self, Stack(
                tuple(self._node_of(a) for a in arrays), axis))

    def _einsum(self, subscripts: str, args):
        if self.mode == EAGER:
            return np.einsum(subscripts, *[self._eager_value(a)
                                           for a in args])
        return LazyArray(self, Einsum(
                subscripts, tuple(self._node_of(a) for a in args)))

    def _sum(self, a, axis):
        if self.mode == EAGER:
            return np.sum(self._eager_value(a), axis=axis)
        node = self._node_of(a)
        rank = node.rank
        if axis is None:
            reduced = set(range(rank))
        elif isinstance(axis, int):
            reduced = {axis % rank}
        else:
            reduced = {ax % rank for ax in axis}
        letters = _EINSUM_LETTERS[:rank]
        out = "".join(letters[k] for k in range(rank) if k not in reduced)
        return LazyArray(self, Einsum(f"{letters}->{out}", (node,)))

    # }}}

    # {{{ communication

    def receive(self, source: int, tag: int, shape: Sequence[int],
                dtype: DType = DType.F64) -> LazyArray:
        return LazyArray(self, Receive(source, tag, tuple(shape), dtype))

    def send(self, value, dest: int, tag: int, *, stapled_to) -> LazyArray:
        """Record an outgoing message; returns *stapled_to* with the send
        attached so that reachability keeps it alive."""
        data = self._node_of(value)
        carrier = self._node_of(stapled_to)
        return LazyArray(self, SendWrapper(carrier, Send(data, dest, tag)))

    # }}}

    def freeze(self, what):
        return freeze(self, what)

    def compile(self, f: Callable) -> "CompiledFunction":
        return CompiledFunction(self, f)

    def outline(self, f: Callable) -> Callable:
        """Wrap *f* so each invocation becomes a function call node.

        The body is traced once per argument signature and shared by
        all calls with that signature.
        """
        if self.mode == EAGER:
            return f

        def wrapper(*args: LazyArray) -> LazyArray | dict[str, LazyArray]:
            sig = tuple((a.node.shape, a.node.dtype) for a in args)
            key = (f, sig)
            if key not in self._outlined:
                params = [Placeholder(f"_p{k}", a.node.shape, a.node.dtype)
                          for k, a in enumerate(args)]
                traced = f(*[LazyArray(self, p) for p in params])
                returns = _named_results(traced)
                self._outlined[key] = FunctionDefinition(
                        f.__name__, tuple(params),
                        tuple((name, r.node) for name, r in returns.items()))
            fdef = self._outlined[key]
            call = Call(fdef, tuple(
                    (p.name, a.node)
                    for p, a in zip(fdef.parameters, args)))
            results = {name: LazyArray(self, CallResult(call, name))
                       for name, _ in fdef.returns}
            if set(results) == {"out"}:
                return results["out"]
            return results

        wrapper.__name__ = f.__name__
        return wrapper

# }}}


# {{{ freeze

def freeze(actx: ArrayContext, what) -> np.ndarray | dict[str, np.ndarray]:
    """Force evaluation of a lazy array (or a flat named map of them).

    Runs the whole pipeline: graph passes, lowering, IR passes, code
    generation, and one execution.  In an eager context this is the
    identity on values.
    """
    if actx.mode == EAGER:
        if isinstance(what, Mapping):
            return {k: np.asarray(v) for k, v in what.items()}
        return np.asarray(what)

    if isinstance(what, Mapping):
        outputs = {name: v.node for name, v in what.items()}
        single = None
    else:
        outputs = {"out": what.node}
        single = "out"
    graph = Graph(outputs)
    _reject_free_graph(graph)

    from .pipeline import compile_graph
    program = compile_graph(graph, actx.pass_config)
    result = program.execute({})
    if single is not None:
        return result[single]
    return result


def _reject_free_graph(graph: Graph) -> None:
    unbound = sorted({n.name for n in adfg.all_nodes(graph)
                      if isinstance(n, Placeholder)})
    if unbound:
        raise UnboundPlaceholder(
                f"cannot freeze: unbound placeholders {unbound}")
    comm = [n for n in adfg.all_nodes(graph)
            if isinstance(n, (Receive, Send, SendWrapper))]
    if comm:
        raise CommunicationInSingleProcessGraph(
                "cannot freeze a graph containing communication nodes; "
                "use the distributed executor")

# }}}


# {{{ compile

def _named_results(traced) -> dict[str, LazyArray]:
    if isinstance(traced, LazyArray):
        return {"out": traced}
    if isinstance(traced, Mapping):
        bad = [k for k, v in traced.items() if not isinstance(v, LazyArray)]
        if bad:
            raise TracingError(f"function produced non-array results for "
                               f"keys {bad}")
        if not traced:
            raise TracingError("function produced an empty result map")
        return dict(traced)
    raise TracingError(
            f"function must return a lazy array or a flat named map, got "
            f"{type(traced).__name__}")


def _classify_argument(value):
    """Map one call argument to its signature entry."""
    if value is None:
        return ("none",)
    if isinstance(value, (bool, np.bool_)):
        return ("scalar", DType.BOOL)
    if isinstance(value, (int, np.integer)):
        return ("scalar", DType.I64)
    if isinstance(value, (float, np.floating)):
        return ("scalar", DType.F64)
    if isinstance(value, np.ndarray):
        return ("array", value.shape, DType.from_numpy(value.dtype))
    raise SignatureUnsupported(
            f"compiled functions take arrays, scalars, or None; got "
            f"{type(value).__name__}")


class CompiledFunction:
    """A function traced per argument signature and cached.

    Scalars become rank-0 placeholders rather than baked constants, so
    calling again with a different scalar value reuses the same
    program.

    .. attribute:: trace_count
    .. attribute:: execution_count
    .. attribute:: cache_hits
    """

    def __init__(self, actx: ArrayContext, f: Callable) -> None:
        self.actx = actx
        self.f = f
        self.programs: dict[tuple, Any] = {}
        self.trace_count = 0
        self.execution_count = 0
        self.cache_hits = 0

    def __call__(self, *args, **kwargs):
        bound = inspect.signature(self.f).bind(*args, **kwargs)
        bound.apply_defaults()
        items = list(bound.arguments.items())

        if self.actx.mode == EAGER:
            self.execution_count += 1
            return self.f(*bound.args, **bound.kwargs)

        signature = tuple((name, _classify_argument(value))
                          for name, value in items)
        if signature in self.programs:
            self.cache_hits += 1
        else:
            self.programs[signature] = self._trace(items)
        program, result_names, single = self.programs[signature]

        bindings = {}
        for name, value in items:
            if value is None:
                continue
            kind = _classify_argument(value)
            if kind[0] == "scalar":
                bindings[name] = np.asarray(value, kind[1].to_numpy)
            else:
                bindings[name] = np.asarray(value)
        self.execution_count += 1
        out = program.execute(bindings)
        if single is not None:
            return out[single]
        return {name: out[name] for name in result_names}

    def _trace(self, items):
        self.trace_count += 1
        logger.info("tracing %s for a new signature", self.f.__name__)
        call_args = {}
        for name, value in items:
            kind = _classify_argument(value)
            if kind[0] == "none":
                call_args[name] = None
            elif kind[0] == "scalar":
                call_args[name] = LazyArray(
                        self.actx, Placeholder(name, (), kind[1]))
            else:
                call_args[name] = LazyArray(
                        self.actx, Placeholder(name, kind[1], kind[2]))
        traced = self.f(**call_args)
        results = _named_results(traced)
        single = "out" if isinstance(traced, LazyArray) else None
        graph = Graph({name: v.node for name, v in results.items()})

        from .pipeline import compile_graph
        program = compile_graph(graph, self.actx.pass_config)
        return program, sorted(results), single


def compile(actx: ArrayContext, f: Callable) -> CompiledFunction:  # noqa: A001
    """Trace *f* lazily, once per distinct argument signature."""
    return CompiledFunction(actx, f)

# }}}


def _resolve_reshape(old_shape: tuple[int, ...], newshape) -> tuple[int, ...]:
    if isinstance(newshape, (int, np.integer)):
        newshape = (int(newshape),)
    newshape = tuple(int(e) for e in newshape)
    if newshape.count(-1) > 1:
        raise ShapeMismatch("at most one extent may be -1")
    if -1 in newshape:
        size = 1
        for e in old_shape:
            size *= e
        known = 1
        for e in newshape:
            if e != -1:
                known *= e
        if known == 0 or size % known:
            raise ShapeMismatch(
                    f"cannot infer extent: {old_shape} to {newshape}")
        newshape = tuple(size // known if e == -1 else e for e in newshape)
    return newshape
