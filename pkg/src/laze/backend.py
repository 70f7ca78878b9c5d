"""Execution and code generation for scalar-loop programs.

The interpreter evaluates each nest as vectorized numpy operations over
index grids, with reduction loops run explicitly in ascending order so
results are reproducible bit for bit.  The emitter prints each nest as
an OpenCL-style kernel: up to three parallel loop variables map to
global ids with an explicit bound guard, remaining loops stay
sequential, selections become ternaries with operands hoisted into
single-assignment locals, and arrays are indexed through row-major
flattening.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import expr as ex
from .adfg import DType
from .errors import BindingMismatch, LazeError, OutOfBoundsIndex
from .scalar_ir import (
    INPUT, OUTPUT, ArrayDecl, CallStep, IrProgram, LoopNest, Statement,
)


# {{{ interpreter

@dataclass
class ProfileRecord:
    """Wall time of one executed step."""

    program: str
    step_index: int
    kind: str
    what: str
    nanoseconds: int


def _check_binding(decl: ArrayDecl, value: object) -> np.ndarray:
    arr = np.asarray(value)
    if arr.shape != decl.shape:
        raise BindingMismatch(
                f"input {decl.name!r} expects shape {decl.shape}, got "
                f"{arr.shape}")
    want = decl.dtype.to_numpy
    if arr.dtype != want:
        if not np.can_cast(arr.dtype, want, casting="same_kind") \
                and arr.dtype.kind != "i":
            raise BindingMismatch(
                    f"input {decl.name!r} expects {decl.dtype.value}, got "
                    f"{arr.dtype}")
        arr = arr.astype(want)
    return arr


def _bounds_checked(name: str, indices: tuple, shape: tuple[int, ...],
                    ) -> tuple:
    checked = []
    for axis, (idx, extent) in enumerate(zip(indices, shape)):
        idx = np.asarray(idx)
        if idx.size and (np.any(idx < 0) or np.any(idx >= extent)):
            raise OutOfBoundsIndex(
                    f"index into {name!r} axis {axis} leaves [0, {extent})")
        checked.append(idx)
    return tuple(checked)


def run_ir(program: IrProgram, bindings: Mapping[str, object],
           profile: list[ProfileRecord] | None = None,
           ) -> dict[str, np.ndarray]:
    """Execute a program on numpy arrays, returning outputs by name."""
    env: dict[str, np.ndarray] = {}
    for cname, value in program.constants:
        env[cname] = value
    for decl in program.arrays:
        if decl.storage == INPUT:
            if decl.name in env:
                continue
            if decl.name not in bindings:
                raise BindingMismatch(f"missing input {decl.name!r}")
            env[decl.name] = _check_binding(decl, bindings[decl.name])
        else:
            env[decl.name] = np.empty(decl.shape, decl.dtype.to_numpy)

    for step in program.steps:
        t0 = time.perf_counter_ns()
        if isinstance(step, CallStep):
            sub = {callee_in: env[caller]
                   for callee_in, caller in step.arg_map}
            results = run_ir(step.callee, sub, profile)
            for callee_out, caller in step.result_map:
                env[caller][...] = results[callee_out]
            what = step.callee.name
        else:
            _run_nest(step, env)
            what = ", ".join(sorted({s.target for s in step.body}))
        if profile is not None:
            profile.append(ProfileRecord(
                    program.name, getattr(step, "index", -1),
                    "call" if isinstance(step, CallStep) else "nest",
                    what, time.perf_counter_ns() - t0))

    return {out_name: env[array_name]
            for out_name, array_name in program.outputs}


def _run_nest(nest: LoopNest, env: dict[str, np.ndarray]) -> None:
    extents = nest.extents
    if any(e == 0 for e in extents):
        return
    grids = np.indices(extents) if extents else ()
    var_env: dict[str, object] = {
            v.name: grids[k] for k, v in enumerate(nest.loop_vars)}
    registers: dict[str, object] = {}

    def load(node: ex.Load, indices: tuple) -> object:
        name = str(node.ref)
        if name in registers:
            return registers[name]
        arr = env[name]
        if not indices:
            return arr[()] if arr.ndim == 0 else arr
        return arr[_bounds_checked(name, indices, arr.shape)]

    for stmt in nest.body:
        value = ex.evaluate(stmt.rhs, var_env, load)
        if stmt.scalar:
            registers[stmt.target] = value
        else:
            env[stmt.target][...] = value

# }}}


# {{{ kernel emission

_C_TYPE = {
    DType.F64: "double",
    DType.F32: "float",
    DType.I64: "long",
    DType.BOOL: "char",
}

_C_BINOP = {
    "add": "+", "sub": "-", "mul": "*", "truediv": "/",
    "floordiv": "/", "mod": "%",
    "lt": "<", "le": "<=", "gt": ">", "ge": ">=", "eq": "==", "ne": "!=",
}

_C_PRECEDENCE = {
    "mul": 5, "truediv": 5, "floordiv": 5, "mod": 5,
    "add": 4, "sub": 4,
    "lt": 3, "le": 3, "gt": 3, "ge": 3,
    "eq": 2, "ne": 2,
}

MAX_GLOBAL_DIMS = 3


@dataclass(frozen=True)
class KernelSource:
    """One emitted kernel with its launch geometry."""

    name: str
    text: str
    global_extents: tuple[int, ...]
    nest_index: int


def _dtype_of(e: ex.Expr, env: Mapping[str, DType]) -> DType:
    if isinstance(e, ex.Const):
        if isinstance(e.value, bool):
            return DType.BOOL
        return DType.I64 if isinstance(e.value, int) else DType.F64
    if isinstance(e, ex.Var):
        return env.get(e.name, DType.I64)
    if isinstance(e, ex.Load):
        return env[str(e.ref)]
    if isinstance(e, ex.UnOp):
        inner = _dtype_of(e.operand, env)
        if e.op in ("sqrt", "exp", "log"):
            return inner if inner == DType.F32 else DType.F64
        return inner
    if isinstance(e, ex.Where):
        return _promote(_dtype_of(e.then, env), _dtype_of(e.otherwise, env))
    if isinstance(e, ex.Reduce):
        return _dtype_of(e.body, env)
    assert isinstance(e, ex.BinOp)
    if e.op in ex.COMPARISON_OPS:
        return DType.BOOL
    joint = _promote(_dtype_of(e.left, env), _dtype_of(e.right, env))
    if e.op == "truediv" and joint.is_integral:
        return DType.F64
    return joint


def _promote(a: DType, b: DType) -> DType:
    order = [DType.BOOL, DType.I64, DType.F32, DType.F64]
    return max(a, b, key=order.index)


class _CPrinter:
    """Prints expressions as C, hoisting selection operands to locals."""

    def __init__(self, decls: Mapping[str, ArrayDecl],
                 dtype_env: dict[str, DType]) -> None:
        self.decls = decls
        self.dtype_env = dtype_env
        self.prelude: list[str] = []
        self.counter = 0

    def hoist(self, text: str, dtype: DType) -> str:
        local = f"_e{self.counter}"
        self.counter += 1
        self.prelude.append(
                f"const {_C_TYPE[dtype]} {local} = {text};")
        return local

    def flat_index(self, name: str, indices: tuple[ex.Expr, ...]) -> str:
        shape = self.decls[name].shape
        strides = [1] * len(shape)
        for k in range(len(shape) - 2, -1, -1):
            strides[k] = strides[k + 1] * shape[k + 1]
        terms = []
        for e, stride in zip(indices, strides):
            body = self.print(e, 5)
            terms.append(body if stride == 1 else f"{body} * {stride}")
        return " + ".join(terms) if terms else "0"

    def print(self, e: ex.Expr, parent_prec: int = 0) -> str:
        if isinstance(e, ex.Const):
            if isinstance(e.value, bool):
                return "1" if e.value else "0"
            if isinstance(e.value, int):
                return str(e.value)
            return repr(float(e.value))
        if isinstance(e, ex.Var):
            return e.name
        if isinstance(e, ex.Load):
            name = str(e.ref)
            if name in self.dtype_env and name not in self.decls:
                return name      # scalar register
            return f"{name}[{self.flat_index(name, e.indices)}]"
        if isinstance(e, ex.UnOp):
            inner = self.print(e.operand, 6)
            if e.op == "neg":
                return f"-{inner}"
            if e.op == "abs":
                fn = "fabs" if not _dtype_of(e.operand,
                                             self.dtype_env).is_integral \
                    else "abs"
                return f"{fn}({self.print(e.operand)})"
            return f"{e.op}({self.print(e.operand)})"
        if isinstance(e, ex.Where):
            cond = self.print(e.cond, 1)
            then = self.hoist(self.print(e.then),
                              _dtype_of(e.then, self.dtype_env))
            other = self.hoist(self.print(e.otherwise),
                               _dtype_of(e.otherwise, self.dtype_env))
            text = f"{cond} ? {then} : {other}"
            return f"({text})" if parent_prec > 0 else text
        if isinstance(e, ex.Reduce):
            raise LazeError("reductions are emitted at statement level")
        assert isinstance(e, ex.BinOp)
        if e.op in ("min", "max"):
            dtype = _dtype_of(e, self.dtype_env)
            left = self.hoist(self.print(e.left), dtype)
            right = self.hoist(self.print(e.right), dtype)
            cmp_op = ">" if e.op == "max" else "<"
            text = f"{left} {cmp_op} {right} ? {left} : {right}"
            return f"({text})" if parent_prec > 0 else text
        if e.op == "pow":
            return f"pow({self.print(e.left)}, {self.print(e.right)})"
        prec = _C_PRECEDENCE[e.op]
        left = self.print(e.left, prec)
        right = self.print(e.right, prec + 1)
        text = f"{left} {_C_BINOP[e.op]} {right}"
        return f"({text})" if parent_prec > prec else text


def _emit_statement(stmt: Statement, nest: LoopNest, printer: _CPrinter,
                    indent: str) -> list[str]:
    lines: list[str] = []

    def flush_prelude() -> None:
        lines.extend(indent + p for p in printer.prelude)
        printer.prelude.clear()

    if isinstance(stmt.rhs, ex.Reduce):
        red = stmt.rhs
        dtype = _dtype_of(red.body, printer.dtype_env)
        acc = f"_acc{printer.counter}"
        printer.counter += 1
        ctype = _C_TYPE[dtype]
        if red.op == "sum":
            lines.append(f"{indent}{ctype} {acc} = 0;")
        else:
            lines.append(f"{indent}{ctype} {acc};")
            lines.append(f"{indent}int {acc}_set = 0;")
        inner = indent
        for rname, extent in red.axes:
            lines.append(f"{inner}for (long {rname} = 0; {rname} < {extent}; "
                         f"++{rname})")
            lines.append(inner + "{")
            inner += "    "
        body_text = printer.print(red.body)
        lines.extend(inner + p for p in printer.prelude)
        printer.prelude.clear()
        if red.op == "sum":
            lines.append(f"{inner}{acc} = {acc} + ({body_text});")
        else:
            val = f"_e{printer.counter}"
            printer.counter += 1
            cmp_op = ">" if red.op == "max" else "<"
            lines.append(f"{inner}const {ctype} {val} = {body_text};")
            lines.append(f"{inner}{acc} = (!{acc}_set || {val} {cmp_op} "
                         f"{acc}) ? {val} : {acc};")
            lines.append(f"{inner}{acc}_set = 1;")
        for rname, _ in reversed(red.axes):
            inner = inner[:-4]
            lines.append(inner + "}")
        rhs_text = acc
    else:
        rhs_text = printer.print(stmt.rhs)
        flush_prelude()

    if stmt.scalar:
        dtype = printer.dtype_env[stmt.target]
        lines.append(f"{indent}const {_C_TYPE[dtype]} {stmt.target} = "
                     f"{rhs_text};")
    else:
        identity = tuple(ex.Var(v.name) for v in nest.loop_vars)
        lhs = f"{stmt.target}[{printer.flat_index(stmt.target, identity)}]"
        lines.append(f"{indent}{lhs} = {rhs_text};")
    return lines


def emit_nest(program: IrProgram, nest: LoopNest) -> KernelSource:
    """Print one loop nest as an OpenCL-style kernel."""
    decls = program.decls
    reads = sorted({load.ref for stmt in nest.body
                    for load in ex.loads_in(stmt.rhs)
                    if load.ref in decls}
                   - {stmt.target for stmt in nest.body})
    writes = sorted({stmt.target for stmt in nest.body if not stmt.scalar})

    dtype_env: dict[str, DType] = {name: decls[name].dtype for name in decls}
    for v in nest.loop_vars:
        dtype_env[v.name] = DType.I64
    for stmt in nest.body:
        if stmt.scalar:
            dtype_env[stmt.target] = _dtype_of(stmt.rhs, dtype_env)

    parallel = [v for v in nest.loop_vars if v.parallel][:MAX_GLOBAL_DIMS]
    sequential = [v for v in nest.loop_vars if v not in parallel]

    params = []
    for name in reads:
        d = decls[name]
        params.append(f"__global const {_C_TYPE[d.dtype]} *{name}")
    for name in writes:
        d = decls[name]
        params.append(f"__global {_C_TYPE[d.dtype]} *{name}")
    for k, v in enumerate(parallel):
        params.append(f"const long n{nest.loop_vars.index(v)}")

    kernel_name = f"{program.name}_{nest.index}"
    lines = [f"__kernel void {kernel_name}("]
    lines.extend(f"    {p}," if k + 1 < len(params) else f"    {p})"
                 for k, p in enumerate(params))
    if not params:
        lines[0] = f"__kernel void {kernel_name}()"
    lines.append("{")
    indent = "    "

    # innermost parallel variable gets the fastest-moving dimension
    for dim, v in enumerate(reversed(parallel)):
        pos = nest.loop_vars.index(v)
        lines.append(f"{indent}const long i{pos} = get_global_id({dim});")
    if parallel:
        guard = " && ".join(
                f"i{nest.loop_vars.index(v)} < n{nest.loop_vars.index(v)}"
                for v in parallel)
        lines.append(f"{indent}if ({guard})")
        lines.append(indent + "{")
        indent += "    "

    for v in sequential:
        lines.append(f"{indent}for (long {v.name} = 0; {v.name} < "
                     f"{v.extent}; ++{v.name})")
        lines.append(indent + "{")
        indent += "    "

    printer = _CPrinter(decls, dtype_env)
    for stmt in nest.body:
        lines.extend(_emit_statement(stmt, nest, printer, indent))

    for _ in sequential:
        indent = indent[:-4]
        lines.append(indent + "}")
    if parallel:
        indent = indent[:-4]
        lines.append(indent + "}")
    lines.append("}")

    return KernelSource(
            name=kernel_name,
            text="\n".join(lines),
            global_extents=tuple(v.extent for v in reversed(parallel)),
            nest_index=nest.index)


def emit_kernels(program: IrProgram) -> tuple[KernelSource, ...]:
    """Emit kernels for every nest, callee programs included."""
    out: list[KernelSource] = []
    for step in program.steps:
        if isinstance(step, CallStep):
            out.extend(emit_kernels(step.callee))
        else:
            out.append(emit_nest(program, step))
    return tuple(out)


def program_source(program: IrProgram) -> str:
    return "\n\n".join(k.text for k in emit_kernels(program))

# }}}


# {{{ stage timing

STAGES = (
    "trace", "graph_passes", "partition", "lower",
    "validate", "ir_passes", "emit", "execute",
)


@dataclass
class StageTimer:
    """Accumulates wall time per pipeline stage.

    ``percentages`` always covers every stage and sums to 100 (within
    rounding) once any stage has run.
    """

    nanoseconds: dict[str, int] = field(
            default_factory=lambda: {s: 0 for s in STAGES})

    def stage(self, name: str) -> "_StageScope":
        if name not in self.nanoseconds:
            raise LazeError(f"unknown stage {name!r}")
        return _StageScope(self, name)

    def add(self, name: str, ns: int) -> None:
        self.nanoseconds[name] += ns

    def percentages(self) -> dict[str, float]:
        total = sum(self.nanoseconds.values())
        if total == 0:
            return {s: 0.0 for s in STAGES}
        return {s: 100.0 * self.nanoseconds[s] / total for s in STAGES}

    def as_text(self) -> str:
        pct = self.percentages()
        return "\n".join(
                f"{s:>12}: {self.nanoseconds[s] / 1e6:9.3f} ms "
                f"({pct[s]:5.1f}%)"
                for s in STAGES)


class _StageScope:
    def __init__(self, timer: StageTimer, name: str) -> None:
        self.timer = timer
        self.name = name

    def __enter__(self) -> "_StageScope":
        self.t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc) -> None:
        self.timer.add(self.name, time.perf_counter_ns() - self.t0)

# }}}
