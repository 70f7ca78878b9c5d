"""Loop fusion, array contraction, parallel tagging: legality and effect."""

import itertools

import numpy as np
import pytest

from laze import expr as ex
from laze import scalar_ir as sir
from laze.adfg import Graph, set_materialized
from laze.backend import run_ir
from laze.frontend import ArrayContext, LazyArray
from laze.graph_passes import PassConfig, PassLog, materialize
from laze.ir_passes import (
    apply_ir_passes, contract_arrays, fuse_loops, tag_parallel,
)
from laze.scalar_ir import (
    ArrayDecl, CallStep, DType, IrProgram, LoopNest, LoopVar, Statement,
    lower, program_text, validate,
)

from randprog import random_graph


def _i(name):
    return ex.Var(name)


def _at(ref, *indices):
    return ex.Load(ref, tuple(indices))


def _two_nest_program():
    """tmp[i] = x[i] + y[i]; z[i] = 2 * tmp[i], as separate nests."""
    ctx = ArrayContext()
    x = ctx.placeholder("x", (16,), "f64")
    y = ctx.placeholder("y", (16,), "f64")
    tmp = set_materialized((x + y).node)
    z = 2.0 * LazyArray(ctx, tmp)
    return lower(Graph({"z": z.node}))


# {{{ loop fusion

def test_fuse_merges_elementwise_producer_consumer():
    p = _two_nest_program()
    assert len(p.nests) == 2
    fused = fuse_loops(p)
    assert len(fused.nests) == 1
    assert len(fused.nests[0].body) == 2
    rng = np.random.default_rng(3)
    bindings = {"x": rng.standard_normal(16), "y": rng.standard_normal(16)}
    assert np.array_equal(run_ir(p, bindings)["z"],
                          run_ir(fused, bindings)["z"])


def test_fuse_skips_mismatched_extents():
    decls = (ArrayDecl("x", (10,), DType.F64, sir.INPUT),
             ArrayDecl("y", (12,), DType.F64, sir.INPUT),
             ArrayDecl("out_a", (10,), DType.F64, sir.OUTPUT),
             ArrayDecl("out_b", (12,), DType.F64, sir.OUTPUT))
    p = IrProgram("main", decls, (
            LoopNest(0, (LoopVar("i0", 10),),
                     (Statement("out_a", _at("x", _i("i0"))),)),
            LoopNest(1, (LoopVar("i0", 12),),
                     (Statement("out_b", _at("y", _i("i0"))),)),
            ), (("a", "out_a"), ("b", "out_b")))
    validate(p)
    assert len(fuse_loops(p).nests) == 2


def test_fuse_skips_shifted_dependency():
    shifted = ex.BinOp("max", ex.BinOp("sub", _i("i0"), ex.Const(1)),
                       ex.Const(0))
    decls = (ArrayDecl("x", (6,), DType.F64, sir.INPUT),
             ArrayDecl("t", (6,), DType.F64, sir.TEMPORARY),
             ArrayDecl("out_r", (6,), DType.F64, sir.OUTPUT))
    p = IrProgram("main", decls, (
            LoopNest(0, (LoopVar("i0", 6),),
                     (Statement("t", ex.BinOp("add", _at("x", _i("i0")),
                                              ex.Const(1.0))),)),
            LoopNest(1, (LoopVar("i0", 6),),
                     (Statement("out_r", _at("t", shifted)),)),
            ), (("r", "out_r"),))
    validate(p)
    assert len(fuse_loops(p).nests) == 2


def test_fuse_avoids_cycles_through_other_nests():
    # n0 and n2 share a signature but n2 depends on n0 through the
    # scalar reduction n1; merging them would order n1 both after and
    # before the fused nest.
    decls = (ArrayDecl("x", (8,), DType.F64, sir.INPUT),
             ArrayDecl("t", (8,), DType.F64, sir.TEMPORARY),
             ArrayDecl("s", (), DType.F64, sir.TEMPORARY),
             ArrayDecl("out_r", (8,), DType.F64, sir.OUTPUT))
    p = IrProgram("main", decls, (
            LoopNest(0, (LoopVar("i0", 8),),
                     (Statement("t", ex.BinOp("add", _at("x", _i("i0")),
                                              ex.Const(1.0))),)),
            LoopNest(1, (),
                     (Statement("s", ex.Reduce("sum", (("r0", 8),),
                                               _at("t", _i("r0")))),)),
            LoopNest(2, (LoopVar("i0", 8),),
                     (Statement("out_r", ex.BinOp("mul", _at("t", _i("i0")),
                                                  _at("s"))),)),
            ), (("r", "out_r"),))
    validate(p)
    fused = fuse_loops(p)
    assert len(fused.nests) == 3
    xv = np.arange(8.0)
    expect = (xv + 1.0) * (xv + 1.0).sum()
    assert np.array_equal(run_ir(fused, {"x": xv})["r"], expect)

# }}}


# {{{ array contraction

def test_contract_replaces_fused_temporary_with_register():
    fused = fuse_loops(_two_nest_program())
    contracted = contract_arrays(fused)
    assert len(contracted.arrays) == len(fused.arrays) - 1
    assert "_t0" not in contracted.decls
    (nest,) = contracted.nests
    assert nest.body[0].scalar
    rng = np.random.default_rng(4)
    bindings = {"x": rng.standard_normal(16), "y": rng.standard_normal(16)}
    assert np.array_equal(run_ir(fused, bindings)["z"],
                          run_ir(contracted, bindings)["z"])


def test_contract_keeps_temporary_read_by_second_nest():
    p = _two_nest_program()
    assert contract_arrays(p) is p


def test_contract_keeps_temporary_read_at_shifted_index():
    shifted = ex.BinOp("max", ex.BinOp("sub", _i("i0"), ex.Const(1)),
                       ex.Const(0))
    decls = (ArrayDecl("x", (6,), DType.F64, sir.INPUT),
             ArrayDecl("t", (6,), DType.F64, sir.TEMPORARY),
             ArrayDecl("out_r", (6,), DType.F64, sir.OUTPUT))
    p = IrProgram("main", decls, (
            LoopNest(0, (LoopVar("i0", 6),), (
                Statement("t", ex.BinOp("add", _at("x", _i("i0")),
                                        ex.Const(1.0))),
                Statement("out_r", _at("t", shifted)),
                )),
            ), (("r", "out_r"),))
    validate(p)
    assert contract_arrays(p) is p


def test_contract_keeps_program_outputs_and_call_arguments():
    ctx = ArrayContext()

    def f(u):
        return {"out": u + 1.0}

    fn = ctx.outline(f)
    x = ctx.placeholder("x", (4,), "f64")
    arg = set_materialized((x * 2.0).node)
    p = lower(Graph({"r": fn(LazyArray(ctx, arg)).node}))
    contracted = contract_arrays(fuse_loops(p))
    call_args = {caller for s in contracted.steps if isinstance(s, CallStep)
                 for _, caller in s.arg_map}
    assert call_args <= set(contracted.decls)

# }}}


# {{{ parallel tagging

def test_tag_parallel_marks_elementwise_loops():
    p = contract_arrays(fuse_loops(_two_nest_program()))
    tagged = tag_parallel(p)
    (nest,) = tagged.nests
    assert all(v.parallel for v in nest.loop_vars)


def test_tag_parallel_keeps_cross_iteration_loop_sequential():
    shifted = ex.BinOp("max", ex.BinOp("sub", _i("i0"), ex.Const(1)),
                       ex.Const(0))
    decls = (ArrayDecl("x", (6,), DType.F64, sir.INPUT),
             ArrayDecl("t", (6,), DType.F64, sir.TEMPORARY),
             ArrayDecl("out_r", (6,), DType.F64, sir.OUTPUT))
    p = IrProgram("main", decls, (
            LoopNest(0, (LoopVar("i0", 6),), (
                Statement("t", _at("x", _i("i0"))),
                Statement("out_r", _at("t", shifted)),
                )),
            ), (("r", "out_r"),))
    validate(p)
    (nest,) = tag_parallel(p).nests
    assert not nest.loop_vars[0].parallel


def test_tag_parallel_marks_reduction_output_loops():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (3, 4), "f64")
    b = ctx.placeholder("b", (4, 5), "f64")
    p = lower(Graph({"c": ctx.np.einsum("ij,jk->ik", a, b).node}))
    (nest,) = tag_parallel(p).nests
    assert all(v.parallel for v in nest.loop_vars)

# }}}


# {{{ randomized properties

def _index_value(e: ex.Expr, env: dict) -> int:
    if isinstance(e, ex.Const):
        return int(e.value)
    if isinstance(e, ex.Var):
        return env[e.name]
    if isinstance(e, ex.BinOp):
        a = _index_value(e.left, env)
        b = _index_value(e.right, env)
        return {"add": a + b, "sub": a - b, "mul": a * b,
                "floordiv": a // b, "mod": a % b,
                "min": min(a, b), "max": max(a, b)}[e.op]
    raise KeyError(type(e).__name__)


def _bruteforce_contractible(program: IrProgram) -> set:
    """Temporaries safe to turn into registers, by enumerating accesses.

    A temporary qualifies when it is not an output, never feeds a call,
    is read only in the nest that writes it after the write, and on
    every loop instance every read address equals that instance's write
    address.  Dead temporaries are kept.
    """
    outputs = {a for _, a in program.outputs}
    call_read = set()
    for step in program.steps:
        if isinstance(step, CallStep):
            call_read.update(c for _, c in step.arg_map)

    write_at: dict[str, tuple[int, int]] = {}
    reads: dict[str, list] = {}
    for si, step in enumerate(program.steps):
        if isinstance(step, CallStep):
            continue
        for pi, stmt in enumerate(step.body):
            if isinstance(stmt.rhs, ex.Reduce):
                axes, body = stmt.rhs.axes, stmt.rhs.body
            else:
                axes, body = (), stmt.rhs
            for load in ex.loads_in(body):
                reads.setdefault(load.ref, []).append((si, pi, load, axes))
            if not stmt.scalar:
                write_at[stmt.target] = (si, pi)

    safe = set()
    for decl in program.arrays:
        name = decl.name
        if decl.storage != sir.TEMPORARY or name in outputs:
            continue
        if name in call_read or name not in write_at:
            continue
        uses = reads.get(name, [])
        if not uses:
            continue
        si, pi = write_at[name]
        if any(ri != si or rp <= pi for ri, rp, _, _ in uses):
            continue
        nest = program.steps[si]
        ok = True
        for vals in itertools.product(*(range(v.extent)
                                        for v in nest.loop_vars)):
            base = dict(zip((v.name for v in nest.loop_vars), vals))
            for _, _, load, axes in uses:
                for rvals in itertools.product(*(range(e) for _, e in axes)):
                    env = {**base, **dict(zip((n for n, _ in axes), rvals))}
                    try:
                        got = tuple(_index_value(e_, env)
                                    for e_ in load.indices)
                    except KeyError:
                        ok = False
                        break
                    if got != vals:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            safe.add(name)
    return safe


def test_contraction_matches_bruteforce_oracle():
    disagreements = []
    for seed in range(500):
        graph, _bindings = random_graph(seed, max_extent=6)
        fused = fuse_loops(lower(materialize(graph)))
        contracted = contract_arrays(fused)
        decided = set(fused.decls) - set(contracted.decls)
        expected = _bruteforce_contractible(fused)
        if decided != expected:
            disagreements.append((seed, sorted(decided), sorted(expected)))
    assert not disagreements, disagreements[:5]


def test_passes_preserve_results_bitwise():
    for seed in range(150):
        graph, bindings = random_graph(seed, max_extent=6)
        stagewise = [lower(materialize(graph))]
        stagewise.append(fuse_loops(stagewise[-1]))
        stagewise.append(contract_arrays(stagewise[-1]))
        stagewise.append(tag_parallel(stagewise[-1]))
        first = run_ir(stagewise[0], bindings)
        for later in stagewise[1:]:
            got = run_ir(later, bindings)
            assert set(got) == set(first)
            for key in first:
                assert np.array_equal(got[key], first[key]), (seed, key)


def test_passes_are_idempotent_and_non_increasing():
    for seed in range(200):
        graph, _bindings = random_graph(seed, max_extent=6)
        p = lower(materialize(graph))
        fused = fuse_loops(p)
        assert len(fused.nests) <= len(p.nests)
        assert fuse_loops(fused) is fused
        contracted = contract_arrays(fused)
        assert len(contracted.arrays) <= len(fused.arrays)
        assert contract_arrays(contracted) is contracted


def test_apply_ir_passes_respects_config_and_logs():
    p = _two_nest_program()
    log = PassLog()
    out = apply_ir_passes(p, PassConfig(), log)
    assert len(out.nests) == 1
    assert any("fuse" in line for line in log.lines)
    kept = apply_ir_passes(p, PassConfig(fuse_loops=False,
                                         contract_arrays=False,
                                         tag_parallel=False))
    assert program_text(kept) == program_text(p)

# }}}


if __name__ == "__main__":
    pytest.main([__file__, "-v"])

# vim: foldmethod=marker
