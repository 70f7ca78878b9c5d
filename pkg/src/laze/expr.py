"""Scalar expression trees.

One expression grammar is shared by two consumers: index-lambda nodes in
the array dataflow graph, where loads refer to input slots by position,
and statements in the scalar loop IR, where loads refer to arrays by
name.  Expressions are immutable trees of

* constants,
* index variables,
* element loads ``ref[e0, ..., em]`` whose index expressions are again
  expressions (at most one level of load-within-index, i.e. one gather
  indirection),
* binary operations, unary operations, and a three-way select,
* a reduction clause, which may appear only at the root of an IR
  statement.

The module also hosts the single numeric evaluator used everywhere a
value is actually computed (eager evaluation, constant folding, IR
execution).  Every numeric primitive applied is tallied so that tests
can assert laziness: building graphs must perform no numeric work.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as _cartesian
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from .errors import LazeError


# {{{ grammar

BINARY_OPS = frozenset({
    "add", "sub", "mul", "truediv", "floordiv", "mod", "pow",
    "min", "max", "lt", "le", "gt", "ge", "eq", "ne",
})

COMPARISON_OPS = frozenset({"lt", "le", "gt", "ge", "eq", "ne"})

UNARY_OPS = frozenset({"neg", "abs", "sqrt", "exp", "log"})

REDUCTION_OPS = frozenset({"sum", "max", "min"})


class Expr:
    """Base class for scalar expressions."""

    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    """A literal constant embedded in an expression."""

    value: float | int | bool

    def __post_init__(self) -> None:
        # canonicalize numpy scalars so hashing and printing are uniform
        v = self.value
        if isinstance(v, (bool, np.bool_)):
            v = bool(v)
        elif isinstance(v, (int, np.integer)):
            v = int(v)
        elif isinstance(v, (float, np.floating)):
            v = float(v)
        else:
            raise LazeError(f"unsupported constant: {v!r}")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True)
class Var(Expr):
    """Reference to an index variable by name."""

    name: str


@dataclass(frozen=True)
class Load(Expr):
    """Element access ``ref[indices]``.

    ``ref`` is an integer input slot in graph expressions and an array
    name in IR expressions.  A rank-0 access carries an empty index
    tuple.
    """

    ref: int | str
    indices: tuple[Expr, ...]


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self) -> None:
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op: {self.op!r}")


@dataclass(frozen=True)
class UnOp(Expr):
    op: str
    operand: Expr

    def __post_init__(self) -> None:
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary op: {self.op!r}")


@dataclass(frozen=True)
class Where(Expr):
    """Elementwise select: *then* where *cond* holds, else *otherwise*."""

    cond: Expr
    then: Expr
    otherwise: Expr


@dataclass(frozen=True)
class Reduce(Expr):
    """Reduction over a rectangular domain of fresh index variables.

    ``axes`` pairs each reduction variable with its extent.  Accumulation
    is defined left-to-right by ascending reduction index, outer variable
    first.  Valid only at the root of an IR statement.
    """

    op: str
    axes: tuple[tuple[str, int], ...]
    body: Expr

    def __post_init__(self) -> None:
        if self.op not in REDUCTION_OPS:
            raise ValueError(f"unknown reduction op: {self.op!r}")

# }}}


# {{{ traversal helpers

def children(expr: Expr) -> tuple[Expr, ...]:
    if isinstance(expr, (Const, Var)):
        return ()
    if isinstance(expr, Load):
        return expr.indices
    if isinstance(expr, BinOp):
        return (expr.left, expr.right)
    if isinstance(expr, UnOp):
        return (expr.operand,)
    if isinstance(expr, Where):
        return (expr.cond, expr.then, expr.otherwise)
    if isinstance(expr, Reduce):
        return (expr.body,)
    raise TypeError(f"not an expression: {expr!r}")


def walk(expr: Expr) -> Iterator[Expr]:
    """Yield *expr* and all sub-expressions, pre-order."""
    yield expr
    for c in children(expr):
        yield from walk(c)


def loads_in(expr: Expr) -> Iterator[Load]:
    for sub in walk(expr):
        if isinstance(sub, Load):
            yield sub


def free_variables(expr: Expr) -> frozenset[str]:
    bound: set[str] = set()
    free: set[str] = set()

    def rec(e: Expr) -> None:
        if isinstance(e, Var):
            if e.name not in bound:
                free.add(e.name)
        elif isinstance(e, Reduce):
            added = [name for name, _ in e.axes if name not in bound]
            bound.update(added)
            rec(e.body)
            bound.difference_update(added)
        else:
            for c in children(e):
                rec(c)

    rec(expr)
    return frozenset(free)


def gather_depth(expr: Expr) -> int:
    """Deepest nesting of loads within load indices."""
    if isinstance(expr, Load):
        inner = max((gather_depth(i) for i in expr.indices), default=0)
        return 1 + inner
    return max((gather_depth(c) for c in children(expr)), default=0)


def substitute(
        expr: Expr,
        variables: Mapping[str, Expr] | None = None,
        load_map: Callable[[Load], Expr] | None = None,
        ) -> Expr:
    """Rebuild *expr*, replacing variables and (optionally) whole loads.

    ``load_map``, when given, receives each :class:`Load` *after* its
    index expressions have been substituted and must return the
    replacement expression.
    """
    variables = variables or {}

    def rec(e: Expr) -> Expr:
        if isinstance(e, Const):
            return e
        if isinstance(e, Var):
            return variables.get(e.name, e)
        if isinstance(e, Load):
            new = Load(e.ref, tuple(rec(i) for i in e.indices))
            return load_map(new) if load_map is not None else new
        if isinstance(e, BinOp):
            return BinOp(e.op, rec(e.left), rec(e.right))
        if isinstance(e, UnOp):
            return UnOp(e.op, rec(e.operand))
        if isinstance(e, Where):
            return Where(rec(e.cond), rec(e.then), rec(e.otherwise))
        if isinstance(e, Reduce):
            # reduction variables shadow outer bindings of the same name
            inner = {k: v for k, v in variables.items()
                     if k not in {name for name, _ in e.axes}}
            return Reduce(e.op, e.axes,
                          substitute(e.body, inner, load_map))
        raise TypeError(f"not an expression: {e!r}")

    return rec(expr)

# }}}


# {{{ numeric evaluation

# Tally of numeric primitives applied since the last reset.  Lazy graph
# construction must leave this untouched; tests rely on that.
_op_tally = 0


def reset_op_tally() -> None:
    global _op_tally
    _op_tally = 0


def op_tally() -> int:
    return _op_tally


def _tick() -> None:
    global _op_tally
    _op_tally += 1


_BINARY_FN: dict[str, Callable[[Any, Any], Any]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "truediv": np.true_divide,
    "floordiv": np.floor_divide,
    "mod": np.mod,
    "pow": np.power,
    "min": np.minimum,
    "max": np.maximum,
    "lt": np.less,
    "le": np.less_equal,
    "gt": np.greater,
    "ge": np.greater_equal,
    "eq": np.equal,
    "ne": np.not_equal,
}

_UNARY_FN: dict[str, Callable[[Any], Any]] = {
    "neg": np.negative,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
}

_REDUCE_FN: dict[str, Callable[[Any, Any], Any]] = {
    "sum": np.add,
    "max": np.maximum,
    "min": np.minimum,
}


def evaluate(
        expr: Expr,
        var_env: Mapping[str, Any],
        load: Callable[[Load, tuple[Any, ...]], Any],
        ) -> Any:
    """Evaluate *expr* with numpy semantics.

    ``var_env`` maps index variable names to scalars or integer arrays;
    evaluating over index grids vectorizes the whole domain in one call.
    ``load`` resolves a :class:`Load` given its already-evaluated index
    values.
    """
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return var_env[expr.name]
        except KeyError:
            raise LazeError(f"unbound index variable: {expr.name}") from None
    if isinstance(expr, Load):
        idx = tuple(evaluate(i, var_env, load) for i in expr.indices)
        return load(expr, idx)
    if isinstance(expr, BinOp):
        _tick()
        return _BINARY_FN[expr.op](
                evaluate(expr.left, var_env, load),
                evaluate(expr.right, var_env, load))
    if isinstance(expr, UnOp):
        _tick()
        return _UNARY_FN[expr.op](evaluate(expr.operand, var_env, load))
    if isinstance(expr, Where):
        _tick()
        return np.where(
                evaluate(expr.cond, var_env, load),
                evaluate(expr.then, var_env, load),
                evaluate(expr.otherwise, var_env, load))
    if isinstance(expr, Reduce):
        return _evaluate_reduce(expr, var_env, load)
    raise TypeError(f"not an expression: {expr!r}")


def _evaluate_reduce(
        expr: Reduce,
        var_env: Mapping[str, Any],
        load: Callable[[Load, tuple[Any, ...]], Any],
        ) -> Any:
    # Accumulate strictly left-to-right by ascending reduction index
    # (outer axis first), one vectorized body evaluation per index tuple.
    names = [name for name, _ in expr.axes]
    extents = [extent for _, extent in expr.axes]
    if any(e == 0 for e in extents):
        if expr.op == "sum":
            return 0
        raise LazeError(f"empty domain for {expr.op} reduction")

    acc = None
    env = dict(var_env)
    for combo in _cartesian(*(range(e) for e in extents)):
        # bind as numpy ints: strongly typed, like the vectorized grids
        env.update((n, np.int64(v)) for n, v in zip(names, combo))
        value = evaluate(expr.body, env, load)
        if acc is None:
            acc = value
        else:
            _tick()
            acc = _REDUCE_FN[expr.op](acc, value)
    return acc

# }}}


# {{{ pretty-printing

_BIN_SYMBOL = {
    "add": "+", "sub": "-", "mul": "*", "truediv": "/",
    "floordiv": "//", "mod": "%", "pow": "**",
    "lt": "<", "le": "<=", "gt": ">", "ge": ">=", "eq": "==", "ne": "!=",
}

# precedence levels for parenthesization, higher binds tighter
_PRECEDENCE = {
    "lt": 1, "le": 1, "gt": 1, "ge": 1, "eq": 1, "ne": 1,
    "add": 2, "sub": 2,
    "mul": 3, "truediv": 3, "floordiv": 3, "mod": 3,
    "pow": 4,
}


def to_str(expr: Expr, ref_name: Callable[[int | str], str] = str) -> str:
    """Render *expr* as Python-syntax text.

    The output of graph-level expressions (loads printed as
    ``in<slot>[...]`` via the default ``ref_name``) parses back through
    the program-file reader.  ``min``, ``max``, ``where`` and the unary
    functions render as calls.
    """

    def rec(e: Expr, parent_prec: int) -> str:
        if isinstance(e, Const):
            return repr(e.value)
        if isinstance(e, Var):
            return e.name
        if isinstance(e, Load):
            if not e.indices:
                return f"{ref_name(e.ref)}[()]"
            inner = ", ".join(rec(i, 0) for i in e.indices)
            return f"{ref_name(e.ref)}[{inner}]"
        if isinstance(e, BinOp):
            if e.op in ("min", "max"):
                return f"{e.op}({rec(e.left, 0)}, {rec(e.right, 0)})"
            prec = _PRECEDENCE[e.op]
            text = (f"{rec(e.left, prec)} {_BIN_SYMBOL[e.op]} "
                    f"{rec(e.right, prec + 1)}")
            return f"({text})" if prec < parent_prec else text
        if isinstance(e, UnOp):
            if e.op == "neg":
                return f"-({rec(e.operand, 0)})"
            return f"{e.op}({rec(e.operand, 0)})"
        if isinstance(e, Where):
            return (f"where({rec(e.cond, 0)}, {rec(e.then, 0)}, "
                    f"{rec(e.otherwise, 0)})")
        if isinstance(e, Reduce):
            domain = ", ".join(f"{n}:{x}" for n, x in e.axes)
            return f"reduce_{e.op}([{domain}], {rec(e.body, 0)})"
        raise TypeError(f"not an expression: {e!r}")

    return rec(expr, 0)

# }}}
