"""Node identity, shapes, dtypes, tags, and traversal of the graph."""

import numpy as np
import pytest

from laze import expr as ex
from laze.adfg import (
    AxisTag, Call, Concatenate, Data, DType, Einsum, FunctionDefinition,
    Graph, IndexLambda, Indexing, Placeholder, Reshape, Slice, Stack,
    as_dtype, infer_expr_dtype, merge_axis_tags, parse_einsum, retag,
    set_materialized, successor_counts, topo_order, use_counts,
)
from laze.errors import (
    BadSubscript, DTypeMismatch, ShapeMismatch, TagConflict,
)


def _axpy(n: int = 10):
    a = Placeholder("a", (), DType.F64)
    x = Placeholder("x", (n,), DType.F64)
    y = Placeholder("y", (n,), DType.F64)
    body = ex.BinOp("add",
                    ex.BinOp("mul", ex.Load(0, ()),
                             ex.Load(1, (ex.Var("i0"),))),
                    ex.Load(2, (ex.Var("i0"),)))
    return IndexLambda(body, (a, x, y), (n,))


# {{{ structural identity

def test_structural_identity():
    """Equal construction yields equal nodes with equal digests."""
    m1 = _axpy()
    m2 = _axpy()
    assert m1 == m2
    assert hash(m1) == hash(m2)


def test_identity_distinguishes_payload():
    m = _axpy()
    assert m != _axpy(n=11)
    assert set_materialized(m, True) != m
    assert retag(m, ((AxisTag("role", "dof"),),)) != m


def test_data_identity_by_value():
    d1 = Data(np.arange(4.0))
    d2 = Data(np.arange(4.0))
    d3 = Data(np.arange(4.0) + 1)
    assert d1 == d2
    assert d1 != d3


def test_dedup_via_dict():
    """Structural equality makes nodes usable as mapping keys."""
    seen = {_axpy(): "first"}
    assert seen[_axpy()] == "first"

# }}}


# {{{ dtype handling

def test_as_dtype_accepts_aliases():
    assert as_dtype("f64") is DType.F64
    assert as_dtype("float64") is DType.F64
    assert as_dtype(np.dtype(np.int64)) is DType.I64
    assert as_dtype(DType.BOOL) is DType.BOOL
    with pytest.raises(DTypeMismatch):
        as_dtype("float16")


def test_placeholder_normalizes_dtype_strings():
    p = Placeholder("p", (3,), "f32")
    assert p.dtype is DType.F32


@pytest.mark.parametrize("op,expected", [
    ("add", DType.F64),
    ("lt", DType.BOOL),
])
def test_infer_expr_dtype(op, expected):
    e = ex.BinOp(op, ex.Load(0, (ex.Var("i0"),)), ex.Load(1, (ex.Var("i0"),)))
    got = infer_expr_dtype(e, (DType.F64, DType.F32))
    assert got is expected


def test_weak_scalar_does_not_widen():
    """A literal int scalar keeps a float32 operand at float32."""
    e = ex.BinOp("mul", ex.Const(2), ex.Load(0, (ex.Var("i0"),)))
    assert infer_expr_dtype(e, (DType.F32,)) is DType.F32

# }}}


# {{{ shape checking

def test_reshape_preserves_size():
    x = Placeholder("x", (6,), DType.F64)
    assert Reshape(x, (2, 3)).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        Reshape(x, (4, 2))


def test_concatenate_checks_other_axes():
    x = Placeholder("x", (2, 3), DType.F64)
    y = Placeholder("y", (4, 3), DType.F64)
    assert Concatenate((x, y), 0).shape == (6, 3)
    with pytest.raises(ShapeMismatch):
        Concatenate((x, y), 1)


def test_stack_needs_equal_shapes():
    x = Placeholder("x", (2, 3), DType.F64)
    y = Placeholder("y", (2, 3), DType.F64)
    assert Stack((x, y), 1).shape == (2, 2, 3)
    with pytest.raises(ShapeMismatch):
        Stack((x, Placeholder("z", (3, 2), DType.F64)), 0)


def test_indexing_shapes():
    x = Placeholder("x", (4, 5), DType.F64)
    assert Indexing(x, (2, Slice(1, 4, 2))).shape == (2,)
    idx = Data(np.array([0, 2, 1]))
    assert Indexing(x, (idx, Slice(0, 5, 1))).shape == (3, 5)
    with pytest.raises(BadSubscript):
        Indexing(x, (9, Slice(0, 5, 1)))


@pytest.mark.parametrize("subscripts,shapes,expected", [
    ("ij,jk->ik", ((2, 3), (3, 4)), (2, 4)),
    ("i,i->", ((5,), (5,)), ()),
    ("ij->i", ((2, 3),), (2,)),
    ("ij->ji", ((2, 3),), (3, 2)),
])
def test_einsum_shapes(subscripts, shapes, expected):
    args = tuple(Placeholder(f"a{k}", s, DType.F64)
                 for k, s in enumerate(shapes))
    e = Einsum(subscripts, args)
    assert e.shape == expected
    inputs, output, _ = parse_einsum(subscripts, shapes)
    reduced = set("".join(inputs)) - set(output)
    assert e.has_reduction == bool(reduced)
    assert set(e.reduction_letters) == reduced


def test_einsum_extent_mismatch():
    a = Placeholder("a", (2, 3), DType.F64)
    b = Placeholder("b", (4, 5), DType.F64)
    with pytest.raises(ShapeMismatch):
        Einsum("ij,jk->ik", (a, b))

# }}}


# {{{ axis tags

def test_merge_axis_tags_unions():
    merged = merge_axis_tags((AxisTag("a", "1"),), (AxisTag("b", "2"),),
                             what="t")
    assert set(merged) == {AxisTag("a", "1"), AxisTag("b", "2")}


def test_merge_axis_tags_conflict():
    with pytest.raises(TagConflict):
        merge_axis_tags((AxisTag("a", "1"),), (AxisTag("a", "2"),), what="t")


def test_retag_roundtrip():
    m = _axpy()
    tagged = retag(m, ((AxisTag("role", "dof"),),))
    assert tagged.axis_tags == ((AxisTag("role", "dof"),),)
    assert tagged.shape == m.shape

# }}}


# {{{ traversal

def test_topo_order_is_postorder():
    m = _axpy()
    g = Graph({"r": m})
    order = [n for n in topo_order(g)]
    pos = {n: k for k, n in enumerate(order)}
    for n in order:
        for c in n.traversal_children():
            assert pos[c] < pos[n]


def test_successor_counts_diamond():
    m = _axpy()
    o1 = IndexLambda(ex.BinOp("add", ex.Load(0, (ex.Var("i0"),)),
                              ex.Const(1.0)), (m,), m.shape)
    o2 = IndexLambda(ex.BinOp("mul", ex.Load(0, (ex.Var("i0"),)),
                              ex.Const(2.0)), (m,), m.shape)
    counts = successor_counts(Graph({"o1": o1, "o2": o2}))
    assert counts[m] == 2


def test_double_edge_counts_once_per_use():
    """One consumer holding two edges: one successor, two uses."""
    a = Placeholder("a", (3,), DType.F64)
    sq = IndexLambda(
            ex.BinOp("mul", ex.Load(0, (ex.Var("i0"),)),
                     ex.Load(1, (ex.Var("i0"),))),
            (a, a), (3,))
    g = Graph({"r": sq})
    assert successor_counts(g)[a] == 1
    assert use_counts(g)[a] == 2


def test_function_bodies_are_private():
    """Traversal does not walk into function definitions."""
    p = Placeholder("_p0", (3,), DType.F64)
    body = IndexLambda(ex.BinOp("mul", ex.Load(0, (ex.Var("i0"),)),
                                ex.Const(2.0)), (p,), (3,))
    fdef = FunctionDefinition("dbl", (p,), (("out", body),))
    x = Placeholder("x", (3,), DType.F64)
    call = Call(fdef, (("_p0", x),))
    from laze.adfg import CallResult
    g = Graph({"r": CallResult(call, "out")})
    nodes = set(topo_order(g))
    assert x in nodes
    assert body not in nodes

# }}}


if __name__ == "__main__":
    import sys
    pytest.main([__file__] + sys.argv[1:])

# vim: foldmethod=marker
