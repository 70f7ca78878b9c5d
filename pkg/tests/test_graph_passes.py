"""Graph passes: dedup, folding, tags, materialization, cost, calls."""

import numpy as np
import pytest

from laze import expr as ex
from laze.adfg import (
    AxisTag, Call, CallResult, Concatenate, Data, DType, Graph, IndexLambda,
    Indexing, Placeholder, node_count, set_materialized, topo_order,
)
from laze.frontend import ArrayContext, LazyArray, eager_eval
from laze.graph_passes import (
    PassConfig, PassLog, apply_graph_passes, concatenate_calls,
    constant_fold, cost_report, dedup, is_materialized, materialize,
    propagate_tags,
)


def _diamond(scale_is_input: bool):
    """mul -> add feeding two consumers; both shapes (8,)."""
    ctx = ArrayContext()
    x = ctx.placeholder("x", (8,), "f64")
    y = ctx.placeholder("y", (8,), "f64")
    if scale_is_input:
        a = ctx.placeholder("a", (), "f64")
        scaled = a * x
    else:
        scaled = 2.0 * x
    shifted = scaled + y
    return Graph({"out1": (shifted + 1.0).node,
                  "out2": (shifted * 2.0).node})


# {{{ dedup

def test_dedup_collapses_equal_subtrees():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (5,), "f64")
    left = (x + 1.0) * 2.0
    right = (x + 1.0) * 3.0
    g = Graph({"l": left.node, "r": right.node})
    out = dedup(g, PassLog())
    (_, ln), (_, rn) = out.outputs
    assert ln.bindings[0] is rn.bindings[0]


def test_dedup_counts():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (5,), "f64")
    g = Graph({"l": ((x + 1.0) * 2.0).node, "r": ((x + 1.0) * 3.0).node})
    assert node_count(dedup(g, PassLog())) < node_count(g) + 1

# }}}


# {{{ constant folding

def _flux_graph():
    """alpha*(kappa/h) * (u_minus + u_plus) with constant coefficients."""
    ctx = ArrayContext()
    alpha = Data(np.asarray(2.0))
    kappa = Data(np.asarray(3.0))
    h = Data(np.asarray(6.0))
    coeff = IndexLambda(
            ex.BinOp("mul", ex.Load(0, ()),
                     ex.BinOp("truediv", ex.Load(1, ()), ex.Load(2, ()))),
            (alpha, kappa, h), ())
    u_minus = ctx.placeholder("u_minus", (4,), "f64")
    u_plus = ctx.placeholder("u_plus", (4,), "f64")
    jump = u_minus + u_plus
    flux = LazyArray(ctx, coeff) * jump
    return Graph({"flux": flux.node})


def test_constant_fold_collapses_constant_subtree():
    g = _flux_graph()
    assert node_count(g) == 8
    folded = constant_fold(g, PassLog())
    assert node_count(folded) == 5
    datas = [n for n in topo_order(folded) if isinstance(n, Data)]
    assert len(datas) == 1
    assert datas[0].data == 1.0


def test_constant_fold_preserves_value():
    g = _flux_graph()
    folded = constant_fold(g, PassLog())
    binds = {"u_minus": np.full(4, 1.0), "u_plus": np.full(4, 3.0)}
    (_, n), = folded.outputs
    np.testing.assert_array_equal(eager_eval(n, binds), np.full(4, 4.0))


def test_constant_fold_fixed_point():
    g = _flux_graph()
    once = constant_fold(g, PassLog())
    twice = constant_fold(once, PassLog())
    assert once == twice


def test_constant_fold_leaves_placeholders():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (3,), "f64")
    g = Graph({"r": (x * 2.0).node})
    assert constant_fold(g, PassLog()) == g

# }}}


# {{{ tag propagation

def test_tags_flow_through_elementwise():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (4, 3), "f64").tagged(0, "role", "el")
    y = ctx.placeholder("y", (4, 3), "f64")
    out = propagate_tags(Graph({"r": (x + y).node}), PassLog())
    (_, rn), = out.outputs
    assert AxisTag("role", "el") in rn.axis_tags[0]
    assert rn.axis_tags[1] == ()


def test_tags_flow_through_einsum_letters():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (4, 5), "f64").tagged(0, "role", "row")
    b = ctx.placeholder("b", (5, 6), "f64").tagged(1, "role", "col")
    mm = ctx.np.einsum("ij,jk->ik", a, b)
    out = propagate_tags(Graph({"m": mm.node}), PassLog())
    (_, mn), = out.outputs
    assert mn.axis_tags == ((AxisTag("role", "row"),),
                            (AxisTag("role", "col"),))

# }}}


# {{{ materialization

def test_chain_materializes_only_output():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (4,), "f64")
    out = ((a + 1.0) * 2.0) - 3.0
    g = materialize(Graph({"r": out.node}))
    (_, rn), = g.outputs
    assert rn.materialized
    mid = rn.bindings[0]
    assert not mid.materialized
    assert not mid.bindings[0].materialized


def test_diamond_materializes_join():
    g = materialize(_diamond(scale_is_input=True))
    (_, o1), (_, o2) = g.outputs
    shifted = o1.bindings[0]
    assert shifted is o2.bindings[0]
    assert shifted.materialized
    assert not shifted.bindings[0].materialized   # the inner mul


def test_materialize_idempotent():
    g = materialize(_diamond(scale_is_input=True))
    assert materialize(g) == g


def test_materialize_override_replaces_heuristic():
    base = _diamond(scale_is_input=True)
    (_, o1), _ = base.outputs
    shifted = o1.bindings[0]
    mul = shifted.bindings[0]
    g = materialize(base, override=frozenset((mul,)))
    (_, n1), _ = g.outputs
    got_shifted = n1.bindings[0]
    assert not got_shifted.materialized
    assert got_shifted.bindings[0].materialized


def test_reduction_einsum_always_materialized():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (3, 4), "f64")
    total = ctx.np.sum(a, axis=1) + 1.0
    g = materialize(Graph({"r": total.node}))
    (_, rn), = g.outputs
    assert rn.bindings[0].materialized


def test_is_materialized_treats_leaves_as_stored():
    p = Placeholder("p", (3,), DType.F64)
    d = Data(np.arange(3.0))
    assert is_materialized(p)
    assert is_materialized(d)

# }}}


# {{{ cost accounting

def test_cost_unmaterialized_diamond_a():
    r = cost_report(_diamond(scale_is_input=True))
    assert (r.reads, r.writes, r.computes) == (6, 2, 6)


def test_cost_materialized_diamond_a():
    r = cost_report(materialize(_diamond(scale_is_input=True)))
    assert (r.reads, r.writes, r.computes) == (5, 3, 4)


def test_cost_unmaterialized_diamond_b():
    r = cost_report(_diamond(scale_is_input=False))
    assert (r.reads, r.writes, r.computes) == (4, 2, 6)


def test_cost_materialized_diamond_b():
    r = cost_report(materialize(_diamond(scale_is_input=False)))
    assert (r.reads, r.writes, r.computes) == (4, 3, 4)


def test_fully_materialized_has_no_recomputation():
    ctx = ArrayContext()
    x = ctx.placeholder("x", (6,), "f64")
    y = ctx.placeholder("y", (6,), "f64")
    u = x * y
    v = u + x
    w = u - v
    g = materialize(Graph({"r": w.node}),
                    override=frozenset((u.node, v.node, w.node)))
    report = cost_report(g)
    assert report.recomputation_rate == 0.0
    assert report.writes == 3

# }}}


# {{{ call concatenation

def _two_calls(shape=(6,)):
    ctx = ArrayContext()
    a = ctx.placeholder("a", shape, "f64")
    b = ctx.placeholder("b", shape, "f64")
    c = ctx.placeholder("c", shape, "f64")
    d = ctx.placeholder("d", shape, "f64")
    fn = ctx.outline(lambda u, v: u * u + v * v)
    total = fn(a, b) + fn(c, d)
    return ctx, Graph({"total": total.node})


def _count_calls(graph):
    return len({n.call for n in topo_order(graph)
                if isinstance(n, CallResult)})


def test_concatenate_calls_merges_independent_pair():
    _, g = _two_calls()
    assert _count_calls(g) == 2
    out = concatenate_calls(g, log=PassLog())
    assert _count_calls(out) == 1
    (call,) = {n.call for n in topo_order(out)
               if isinstance(n, CallResult)}
    assert all(isinstance(arg, Concatenate) for _, arg in call.args)
    (_, total), = out.outputs
    assert all(isinstance(b, Indexing) for b in total.bindings)


def test_concatenate_calls_preserves_value():
    _, g = _two_calls()
    out = concatenate_calls(g, log=PassLog())
    rng = np.random.default_rng(5)
    binds = {k: rng.standard_normal(6) for k in "abcd"}
    (_, before), = g.outputs
    (_, after), = out.outputs
    np.testing.assert_allclose(eager_eval(after, binds),
                               eager_eval(before, binds), rtol=1e-12)


def test_dependent_calls_not_merged():
    """When one call feeds the other they cannot run as one."""
    ctx = ArrayContext()
    x = ctx.placeholder("x", (4,), "f64")
    y = ctx.placeholder("y", (4,), "f64")
    fn = ctx.outline(lambda u, v: u * v)
    first = fn(x, y)
    second = fn(first, y)
    g = Graph({"r": second.node})
    out = concatenate_calls(g, log=PassLog())
    assert _count_calls(out) == 2


def test_concatenation_eligible_filter():
    _, g = _two_calls()
    config = PassConfig(concatenation_eligible=frozenset(("something",)))
    out = apply_graph_passes(g, config, PassLog())
    assert _count_calls(out) == 2


def test_different_signatures_not_merged():
    ctx = ArrayContext()
    a = ctx.placeholder("a", (4,), "f64")
    b = ctx.placeholder("b", (6,), "f64")
    fn = ctx.outline(lambda u: u * 2.0)
    g = Graph({"r4": fn(a).node, "r6": fn(b).node})
    out = concatenate_calls(g, log=PassLog())
    assert _count_calls(out) == 2

# }}}


# {{{ the combined pipeline

def test_apply_graph_passes_order_and_log():
    log = PassLog()
    g = apply_graph_passes(_diamond(scale_is_input=True), PassConfig(), log)
    (_, o1), _ = g.outputs
    assert o1.materialized
    joined = "\n".join(log.lines)
    assert "dedup" in joined
    assert "materialize" in joined


def test_passes_can_be_disabled():
    config = PassConfig(materialize=False, constant_fold=False,
                        dedup=False, propagate_tags=False,
                        concatenate_calls=False)
    g = _diamond(scale_is_input=True)
    assert apply_graph_passes(g, config, PassLog()) == g

# }}}


if __name__ == "__main__":
    import sys
    pytest.main([__file__] + sys.argv[1:])

# vim: foldmethod=marker
