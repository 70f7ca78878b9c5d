"""Interpreter semantics, kernel emission, profiling, stage timing."""

import numpy as np
import pytest

from laze import expr as ex
from laze import scalar_ir as sir
from laze.adfg import Graph
from laze.backend import (
    MAX_GLOBAL_DIMS, ProfileRecord, StageTimer, emit_kernels, emit_nest,
    program_source, run_ir,
)
from laze.errors import BindingMismatch, OutOfBoundsIndex
from laze.frontend import ArrayContext, eager_eval
from laze.graph_passes import apply_graph_passes
from laze.ir_passes import apply_ir_passes
from laze.scalar_ir import (
    ArrayDecl, DType, IrProgram, LoopNest, LoopVar, Statement, lower,
)

from randprog import random_graph


def _pipeline(graph):
    return apply_ir_passes(lower(apply_graph_passes(graph)))


def _axpy_program():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (), "f64")
    x = ctx.placeholder("x", (10,), "f64")
    y = ctx.placeholder("y", (10,), "f64")
    return _pipeline(Graph({"r": ctx.np.maximum(a * x + y, 0.0).node}))


# {{{ interpreter

def test_run_ir_matches_numpy_on_axpy():
    rng = np.random.default_rng(0)
    bindings = {"a": np.float64(0.5),
                "x": rng.standard_normal(10),
                "y": rng.standard_normal(10)}
    got = run_ir(_axpy_program(), bindings)["r"]
    expect = np.maximum(bindings["a"] * bindings["x"] + bindings["y"], 0.0)
    assert np.array_equal(got, expect)


def test_run_ir_matches_eager_on_random_graphs():
    for seed in range(50):
        graph, bindings = random_graph(seed)
        got = run_ir(_pipeline(graph), bindings)
        expect = eager_eval(graph, bindings)
        assert set(got) == set(expect)
        for key in expect:
            ref = np.max(np.abs(expect[key])) if expect[key].size else 0.0
            tol = 1e-12 * max(ref, 1.0)
            assert np.all(np.abs(got[key] - expect[key]) <= tol), (seed, key)


def test_reduction_accumulates_in_ascending_order():
    ctx = ArrayContext()
    v = ctx.placeholder("v", (5,), "f64")
    p = _pipeline(Graph({"s": ctx.np.sum(v).node}))
    vals = np.array([1e16, 1.0, -1e16, 1.0, 1.0])
    got = run_ir(p, {"v": vals})["s"]
    acc = np.float64(0.0)
    for x in vals:
        acc = acc + x
    assert got == acc


def test_gather_is_bounds_checked():
    ctx = ArrayContext()
    v = ctx.placeholder("v", (5,), "f64")
    sel = ctx.placeholder("sel", (3,), "i64")
    p = _pipeline(Graph({"g": v[sel].node}))
    with pytest.raises(OutOfBoundsIndex, match="axis 0"):
        run_ir(p, {"v": np.arange(5.0), "sel": np.array([0, 5, 1])})
    with pytest.raises(OutOfBoundsIndex):
        run_ir(p, {"v": np.arange(5.0), "sel": np.array([0, -1, 1])})


@pytest.mark.parametrize("bad, match", [
    ({"x": np.zeros(3)}, "shape"),
    ({"x": np.zeros(4, dtype=np.complex128)}, "expects f64"),
    ({}, "missing input"),
])
def test_binding_mismatch_is_reported(bad, match):
    ctx = ArrayContext()
    x = ctx.placeholder("x", (4,), "f64")
    p = _pipeline(Graph({"r": (x + 1.0).node}))
    with pytest.raises(BindingMismatch, match=match):
        run_ir(p, bad)


def test_integer_bindings_are_accepted_for_float_inputs():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (4,), "f64")
    p = _pipeline(Graph({"r": (x * 2.0).node}))
    got = run_ir(p, {"x": np.arange(4)})["r"]
    assert np.array_equal(got, np.arange(4.0) * 2.0)


def test_profile_records_cover_steps():
    profile: list[ProfileRecord] = []
    rng = np.random.default_rng(1)
    run_ir(_axpy_program(),
           {"a": 2.0, "x": rng.standard_normal(10),
            "y": rng.standard_normal(10)},
           profile)
    assert len(profile) >= 1
    assert all(rec.nanoseconds >= 0 for rec in profile)
    assert {rec.kind for rec in profile} <= {"nest", "call"}


def test_profile_includes_callee_steps():
    ctx = ArrayContext()

    def f(u):
        return {"out": u * u}

    fn = ctx.outline(f)
    x = ctx.placeholder("x", (4,), "f64")
    p = _pipeline(Graph({"r": fn(x).node}))
    profile: list[ProfileRecord] = []
    run_ir(p, {"x": np.arange(4.0)}, profile)
    assert {rec.kind for rec in profile} == {"nest", "call"}
    assert {rec.program for rec in profile} >= {"main"}

# }}}


# {{{ kernel emission

def test_kernel_has_guarded_global_id():
    (kernel,) = emit_kernels(_axpy_program())
    assert kernel.text.startswith("__kernel void")
    assert "get_global_id(0)" in kernel.text
    assert "if (i0 < n0)" in kernel.text
    assert kernel.global_extents == (10,)


def test_kernel_parameters_are_global_pointers():
    (kernel,) = emit_kernels(_axpy_program())
    assert "__global const double *a" in kernel.text
    assert "__global const double *x" in kernel.text
    assert "__global double *out_r" in kernel.text


def test_selection_operands_are_hoisted():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (8,), "f64")
    p = _pipeline(Graph({"r": ctx.np.maximum(x, 0.0).node}))
    (kernel,) = emit_kernels(p)
    assert " ? " in kernel.text
    assert "const double _e0" in kernel.text


def test_reduction_emits_sequential_accumulator():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (3, 4), "f64")
    b = ctx.placeholder("b", (4, 5), "f64")
    p = _pipeline(Graph({"c": ctx.np.einsum("ij,jk->ik", a, b).node}))
    (kernel,) = emit_kernels(p)
    assert "_acc0" in kernel.text
    assert "for (long r0 = 0; r0 < 4; ++r0)" in kernel.text
    assert kernel.global_extents == (5, 3)


def test_parallel_dims_cap_at_hardware_limit():
    ctx = ArrayContext()
    shape = (2, 3, 2, 3)
    x = ctx.placeholder("x", shape, "f64")
    p = _pipeline(Graph({"r": (x + 1.0).node}))
    (kernel,) = emit_kernels(p)
    assert len(kernel.global_extents) <= MAX_GLOBAL_DIMS
    assert "for (long" in kernel.text


def test_row_major_flattening_in_kernel_indexing():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (3, 5), "f64")
    p = _pipeline(Graph({"r": (x * 2.0).node}))
    (kernel,) = emit_kernels(p)
    assert "x[i0 * 5 + i1]" in kernel.text


def test_integer_arrays_map_to_long():
    ctx = ArrayContext()
    sel = ctx.placeholder("sel", (4,), "i64")
    v = ctx.placeholder("v", (9,), "f64")
    p = _pipeline(Graph({"g": v[sel].node}))
    (kernel,) = emit_kernels(p)
    assert "__global const long *sel" in kernel.text


def test_program_source_covers_callees():
    ctx = ArrayContext()

    def f(u):
        return {"out": u + 1.0}

    fn = ctx.outline(f)
    x = ctx.placeholder("x", (4,), "f64")
    p = _pipeline(Graph({"r": fn(x).node}))
    text = program_source(p)
    assert text.count("__kernel void") == len(emit_kernels(p))
    (step,) = [s for s in p.steps if isinstance(s, sir.CallStep)]
    assert f"__kernel void {step.callee.name}_" in text


def test_emission_is_deterministic():
    assert program_source(_axpy_program()) == program_source(_axpy_program())


def test_empty_nest_emits_parameterless_kernel():
    p = IrProgram(
            "main",
            (ArrayDecl("out_r", (), DType.F64, sir.OUTPUT),),
            (LoopNest(0, (), (Statement("out_r", ex.Const(1.0)),)),),
            (("r", "out_r"),))
    kernel = emit_nest(p, p.steps[0])
    assert "__kernel void main_0(" in kernel.text

# }}}


# {{{ stage timing

def test_stage_timer_percentages_sum_to_100():
    timer = StageTimer()
    assert all(v == 0.0 for v in timer.percentages().values())
    with timer.stage("lower"):
        pass
    timer.add("execute", 3_000_000)
    pct = timer.percentages()
    assert abs(sum(pct.values()) - 100.0) < 1e-9
    assert pct["execute"] > 0.0


def test_stage_timer_rejects_unknown_stage():
    from laze.errors import LazeError
    with pytest.raises(LazeError, match="unknown stage"):
        StageTimer().stage("paint")


def test_stage_timer_text_lists_every_stage():
    timer = StageTimer()
    timer.add("trace", 1_000_000)
    text = timer.as_text()
    from laze.backend import STAGES
    for stage in STAGES:
        assert stage in text

# }}}


if __name__ == "__main__":
    pytest.main([__file__, "-v"])

# vim: foldmethod=marker
