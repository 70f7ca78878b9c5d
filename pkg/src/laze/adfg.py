"""Array dataflow graph.

Nodes are immutable records describing array-valued operations.  A graph
is a set of named output nodes; membership is defined by reachability.
Equality of nodes is structural: two nodes are equal iff their kinds,
payloads, and (recursively) inputs are equal.  Object identity carries
no meaning.  Equality is decided through a cached 64-bit content hash
with a full structural comparison to confirm on hash agreement, so hash
collisions cannot cause false merges.

Shapes are static: every node's shape and dtype are fully determined at
construction, and constructors raise on inconsistent operands.  Each
axis may carry tags (key/value pairs, one value per key per axis),
which participate in node identity.

Function definitions hold a private sub-graph over their own
placeholders.  They appear in the enclosing graph as single nodes:
traversal does not descend into bodies, but hashing and equality do.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from enum import Enum
from hashlib import blake2b
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import expr as ex
from .errors import BadSubscript, DTypeMismatch, LazeError, ShapeMismatch

MAX_RANK = 8


# {{{ dtypes

class DType(Enum):
    """Element types supported across the pipeline."""

    F64 = "f64"
    F32 = "f32"
    I64 = "i64"
    BOOL = "bool"

    @property
    def to_numpy(self) -> np.dtype:
        return _NUMPY_DTYPE[self]

    @property
    def is_integral(self) -> bool:
        return self in (DType.I64, DType.BOOL)

    @classmethod
    def from_numpy(cls, dtype: np.dtype) -> "DType":
        dtype = np.dtype(dtype)
        for k, v in _NUMPY_DTYPE.items():
            if v == dtype:
                return k
        raise DTypeMismatch(f"unsupported element type: {dtype}")


def as_dtype(dtype: "DType | str | np.dtype") -> "DType":
    """Accept element types as enum members, names, or numpy dtypes."""
    if isinstance(dtype, DType):
        return dtype
    if isinstance(dtype, str):
        try:
            return DType(dtype)
        except ValueError:
            return DType.from_numpy(np.dtype(dtype))
    return DType.from_numpy(dtype)


_NUMPY_DTYPE = {
    DType.F64: np.dtype(np.float64),
    DType.F32: np.dtype(np.float32),
    DType.I64: np.dtype(np.int64),
    DType.BOOL: np.dtype(np.bool_),
}

# promotion lattice, broader type wins
_PROMOTION_RANK = {DType.BOOL: 0, DType.I64: 1, DType.F32: 2, DType.F64: 3}


def promote(a: DType, b: DType) -> DType:
    return a if _PROMOTION_RANK[a] >= _PROMOTION_RANK[b] else b


def promote_to_float(t: DType) -> DType:
    return t if t in (DType.F32, DType.F64) else DType.F64

# }}}


# {{{ shapes and axis tags

Shape = tuple[int, ...]


def check_shape(shape: Sequence[int]) -> Shape:
    shape = tuple(shape)
    if len(shape) > MAX_RANK:
        raise ShapeMismatch(f"rank {len(shape)} exceeds the maximum of {MAX_RANK}")
    for extent in shape:
        if not isinstance(extent, (int, np.integer)) or isinstance(extent, bool):
            raise ShapeMismatch(f"extents must be integers, got {extent!r}")
        if extent < 0:
            raise ShapeMismatch(f"negative extent: {extent}")
    return tuple(int(e) for e in shape)


def broadcast_shapes(shapes: Sequence[Shape]) -> Shape:
    """Trailing-aligned broadcast; extent-1 axes stretch."""
    rank = max((len(s) for s in shapes), default=0)
    out = []
    for k in range(rank):
        extent = 1
        for s in shapes:
            pos = len(s) - rank + k
            if pos < 0:
                continue
            e = s[pos]
            if extent == 1:
                extent = e
            elif e not in (1, extent):
                raise ShapeMismatch(
                        f"shapes {list(shapes)} are not broadcast-compatible")
        out.append(extent)
    return tuple(out)


@dataclass(frozen=True, order=True)
class AxisTag:
    """A key/value annotation attached to one array axis."""

    key: str
    value: str


AxisTags = tuple[tuple[AxisTag, ...], ...]


def normalize_axis_tags(
        axis_tags: Sequence[Sequence[AxisTag]] | None, rank: int) -> AxisTags:
    if axis_tags is None:
        return tuple(() for _ in range(rank))
    if len(axis_tags) != rank:
        raise LazeError(
                f"axis_tags cover {len(axis_tags)} axes, node has rank {rank}")
    out = []
    for per_axis in axis_tags:
        per_axis = tuple(sorted(set(per_axis)))
        keys = [t.key for t in per_axis]
        if len(keys) != len(set(keys)):
            raise LazeError(f"duplicate tag key on one axis: {sorted(keys)}")
        out.append(per_axis)
    return tuple(out)


def merge_axis_tags(a: Sequence[AxisTag], b: Sequence[AxisTag],
                    what: str = "axis") -> tuple[AxisTag, ...]:
    """Union two tag sets, raising :class:`~laze.errors.TagConflict` on
    a key mapped to two values."""
    from .errors import TagConflict
    by_key: dict[str, AxisTag] = {}
    for t in tuple(a) + tuple(b):
        seen = by_key.get(t.key)
        if seen is not None and seen.value != t.value:
            raise TagConflict(
                    f"{what}: tag key {t.key!r} carries both "
                    f"{seen.value!r} and {t.value!r}")
        by_key[t.key] = t
    return tuple(sorted(by_key.values()))

# }}}


# {{{ structural hashing

def _ser(h, obj) -> None:
    """Feed a canonical byte encoding of *obj* to hasher *h*."""
    if obj is None:
        h.update(b"N")
    elif isinstance(obj, bool):
        h.update(b"B1" if obj else b"B0")
    elif isinstance(obj, int):
        raw = obj.to_bytes((obj.bit_length() + 8) // 8 + 1,
                           "big", signed=True)
        h.update(b"I" + len(raw).to_bytes(4, "big") + raw)
    elif isinstance(obj, float):
        h.update(b"F" + struct.pack(">d", obj))
    elif isinstance(obj, str):
        raw = obj.encode()
        h.update(b"S" + len(raw).to_bytes(4, "big") + raw)
    elif isinstance(obj, bytes):
        h.update(b"Y" + len(obj).to_bytes(4, "big") + obj)
    elif isinstance(obj, tuple):
        h.update(b"T" + len(obj).to_bytes(4, "big"))
        for item in obj:
            _ser(h, item)
    elif isinstance(obj, Node):
        h.update(b"D" + obj._digest().to_bytes(8, "big"))
    elif isinstance(obj, DType):
        _ser(h, "dtype:" + obj.value)
    elif isinstance(obj, AxisTag):
        _ser(h, ("tag", obj.key, obj.value))
    elif isinstance(obj, ex.Expr):
        h.update(b"E" + type(obj).__name__.encode())
        for f in fields(obj):
            _ser(h, getattr(obj, f.name))
    elif isinstance(obj, Slice):
        _ser(h, ("slice", obj.start, obj.stop, obj.step))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} for hashing")


def _structural_eq(a: "Node", b: "Node", memo: set[tuple[int, int]]) -> bool:
    if a is b:
        return True
    if type(a) is not type(b):
        return False
    key = (id(a), id(b)) if id(a) < id(b) else (id(b), id(a))
    if key in memo:
        # already being compared along another path; assume equal there
        return True
    memo.add(key)
    if a._payload() != b._payload():
        return False
    ca, cb = a._children(), b._children()
    if len(ca) != len(cb):
        return False
    return all(_structural_eq(x, y, memo) for x, y in zip(ca, cb))

# }}}


# {{{ node base classes

class Node:
    """Base class for anything that lives in a dataflow graph."""

    __slots__ = ()

    def _payload(self) -> tuple:
        """Kind-specific data, excluding child nodes, as hashable primitives."""
        raise NotImplementedError

    def _children(self) -> tuple["Node", ...]:
        """Child nodes for structural equality and hashing."""
        raise NotImplementedError

    def traversal_children(self) -> tuple["Node", ...]:
        """Child nodes for graph traversal.

        Differs from :meth:`_children` only for function definitions,
        whose bodies are private sub-graphs.
        """
        return self._children()

    def _digest(self) -> int:
        cached = self.__dict__.get("_hash")
        if cached is None:
            h = blake2b(type(self).__name__.encode(), digest_size=8)
            _ser(h, self._payload())
            for c in self._children():
                _ser(h, c)
            cached = int.from_bytes(h.digest(), "big")
            object.__setattr__(self, "_hash", cached)
        return cached

    def __hash__(self) -> int:
        return self._digest()

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if not isinstance(other, Node):
            return NotImplemented
        if self._digest() != other._digest():
            return False
        # hash agreement is not proof: verify structurally
        return _structural_eq(self, other, set())

    def __ne__(self, other: object) -> bool:
        result = self.__eq__(other)
        return result if result is NotImplemented else not result


@dataclass(frozen=True, eq=False)
class Array(Node):
    """Base class for array-valued nodes.

    .. attribute:: shape
    .. attribute:: dtype
    .. attribute:: axis_tags

        Per-axis tag tuples; part of node identity.

    .. attribute:: materialized

        Whether this node is assigned its own storage when lowered.
        Set by the materialization pass; part of node identity.
    """

    shape: Shape = field(init=False)
    dtype: DType = field(init=False)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def _set_type(self, shape: Shape, dtype: DType) -> None:
        object.__setattr__(self, "shape", check_shape(shape))
        object.__setattr__(self, "dtype", as_dtype(dtype))
        # normalize now so identity and hashing see canonical tags
        object.__setattr__(self, "axis_tags",
                           normalize_axis_tags(self.axis_tags, len(shape)))

    def _tag_payload(self) -> tuple:
        return (self.axis_tags, self.materialized)

# }}}


# {{{ leaf nodes

@dataclass(frozen=True, eq=False)
class Data(Array):
    """A concrete array embedded in the graph."""

    data: np.ndarray
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        dtype = DType.from_numpy(arr.dtype)
        # private copy: the graph must not alias caller-mutable memory
        arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        self._set_type(arr.shape, dtype)

    def _payload(self) -> tuple:
        return (self.shape, self.dtype, self.data.tobytes()) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return ()


@dataclass(frozen=True, eq=False)
class Placeholder(Array):
    """A named input to be bound at execution time."""

    name: str
    _shape: Shape
    _dtype: DType
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        if not self.name.isidentifier():
            raise LazeError(f"placeholder name must be an identifier: "
                            f"{self.name!r}")
        self._set_type(self._shape, self._dtype)

    def _payload(self) -> tuple:
        return (self.name, self.shape, self.dtype) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return ()


@dataclass(frozen=True, eq=False)
class Receive(Array):
    """An array received from another rank; a leaf of the local graph."""

    source: int
    tag: int
    _shape: Shape
    _dtype: DType
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        self._set_type(self._shape, self._dtype)

    def _payload(self) -> tuple:
        return (self.source, self.tag, self.shape, self.dtype) \
                + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return ()

# }}}


# {{{ pointwise and structural operations

@dataclass(frozen=True, eq=False)
class IndexLambda(Array):
    """An array defined elementwise by a scalar expression.

    The expression may use index variables ``i0`` .. ``i<rank-1>`` and
    loads ``in<k>[...]`` referring to ``bindings[k]`` by position.
    """

    expression: ex.Expr
    bindings: tuple[Array, ...]
    _shape: Shape
    _dtype: DType | None = None
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        shape = check_shape(self._shape)
        allowed = {index_name(k) for k in range(len(shape))}
        loose = ex.free_variables(self.expression) - allowed
        if loose:
            raise LazeError(f"expression uses unknown variables: "
                            f"{sorted(loose)}")
        for load in ex.loads_in(self.expression):
            if not isinstance(load.ref, int):
                raise LazeError("graph expressions must load inputs by slot")
            if not 0 <= load.ref < len(self.bindings):
                raise LazeError(f"load refers to input {load.ref}, have "
                                f"{len(self.bindings)} bindings")
            if len(load.indices) != self.bindings[load.ref].rank:
                raise ShapeMismatch(
                        f"input {load.ref} has rank "
                        f"{self.bindings[load.ref].rank}, indexed with "
                        f"{len(load.indices)} subscripts")
        dtype = infer_expr_dtype(
                self.expression, [b.dtype for b in self.bindings])
        if self._dtype is not None and as_dtype(self._dtype) != dtype:
            raise DTypeMismatch(
                    f"declared dtype {self._dtype} does not match inferred "
                    f"{dtype}")
        self._set_type(shape, dtype)

    def _payload(self) -> tuple:
        return (self.expression, self.shape) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return self.bindings


@dataclass(frozen=True, eq=False)
class Reshape(Array):
    """Row-major reinterpretation of an array's shape."""

    array: Array
    newshape: Shape
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        newshape = check_shape(self.newshape)
        object.__setattr__(self, "newshape", newshape)
        if self.array.size != int(np.prod(newshape, dtype=np.int64)
                                  if newshape else 1):
            raise ShapeMismatch(
                    f"cannot reshape {self.array.shape} to {newshape}: "
                    f"element counts differ")
        self._set_type(newshape, self.array.dtype)

    def _payload(self) -> tuple:
        return (self.newshape,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return (self.array,)


@dataclass(frozen=True)
class Slice:
    """A normalized slice: resolved non-negative bounds, positive step."""

    start: int
    stop: int
    step: int = 1

    def __post_init__(self) -> None:
        if self.step < 1:
            raise BadSubscript(f"slice step must be positive, got {self.step}")
        if self.start < 0 or self.stop < 0:
            raise BadSubscript("slice bounds must be resolved and non-negative")

    @property
    def length(self) -> int:
        return len(range(self.start, self.stop, self.step))


Selector = int | Slice | Array


@dataclass(frozen=True, eq=False)
class Indexing(Array):
    """Subscripting with one selector per input axis.

    Integer selectors drop their axis, slices keep it (possibly
    shortened), and at most one selector may be an integer-typed index
    array, whose axes replace the selected axis (a gather).
    """

    array: Array
    selectors: tuple[Selector, ...]
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        if len(self.selectors) != self.array.rank:
            raise BadSubscript(
                    f"{len(self.selectors)} selectors for rank "
                    f"{self.array.rank}")
        arrays = [s for s in self.selectors if isinstance(s, Array)]
        if len(arrays) > 1:
            raise BadSubscript(
                    "at most one index-array selector is supported")
        shape: list[int] = []
        for axis, sel in enumerate(self.selectors):
            extent = self.array.shape[axis]
            if isinstance(sel, (int, np.integer)) and not isinstance(sel, bool):
                if not 0 <= sel < extent:
                    raise BadSubscript(
                            f"index {sel} out of bounds for axis {axis} "
                            f"with extent {extent}")
            elif isinstance(sel, Slice):
                if sel.stop > extent:
                    raise BadSubscript(
                            f"slice {sel} out of bounds for axis {axis} "
                            f"with extent {extent}")
                shape.append(sel.length)
            elif isinstance(sel, Array):
                if sel.dtype != DType.I64:
                    raise BadSubscript("index arrays must have dtype i64")
                shape.extend(sel.shape)
            else:
                raise BadSubscript(f"unsupported selector: {sel!r}")
        # re-pack plain ints so payload hashing sees python ints
        object.__setattr__(
                self, "selectors",
                tuple(int(s) if isinstance(s, (int, np.integer))
                      and not isinstance(s, bool) else s
                      for s in self.selectors))
        self._set_type(tuple(shape), self.array.dtype)

    def _payload(self) -> tuple:
        marks = tuple(s if not isinstance(s, Array) else "<array>"
                      for s in self.selectors)
        return (marks,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return (self.array,) + tuple(
                s for s in self.selectors if isinstance(s, Array))


@dataclass(frozen=True, eq=False)
class Einsum(Array):
    """Einstein-summation over one or more operands.

    Subscripts use the explicit arrow form, e.g. ``"ij,jk->ik"``.
    Letters present in the inputs but absent from the output are summed
    over.
    """

    subscripts: str
    args: tuple[Array, ...]
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "subscripts",
                           self.subscripts.replace(" ", ""))
        in_subs, out_sub, extent_of = parse_einsum(
                self.subscripts, [a.shape for a in self.args])
        shape = tuple(extent_of[letter] for letter in out_sub)
        dtype = self.args[0].dtype
        for a in self.args[1:]:
            dtype = promote(dtype, a.dtype)
        self._set_type(shape, dtype)

    @property
    def reduction_letters(self) -> tuple[str, ...]:
        """Summed-over letters, ordered by first appearance in the inputs."""
        in_subs, out_sub, _ = parse_einsum(
                self.subscripts, [a.shape for a in self.args])
        seen: list[str] = []
        for sub in in_subs:
            for letter in sub:
                if letter not in out_sub and letter not in seen:
                    seen.append(letter)
        return tuple(seen)

    @property
    def has_reduction(self) -> bool:
        return bool(self.reduction_letters)

    def _payload(self) -> tuple:
        return (self.subscripts,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return self.args


def parse_einsum(
        subscripts: str, shapes: Sequence[Shape],
        ) -> tuple[tuple[str, ...], str, dict[str, int]]:
    """Validate einsum subscripts against operand shapes.

    Returns the per-input subscripts, the output subscript, and the
    extent of every letter.
    """
    if "->" not in subscripts:
        raise BadSubscript(f"einsum subscripts need an explicit '->': "
                           f"{subscripts!r}")
    lhs, out_sub = subscripts.split("->")
    in_subs = tuple(lhs.split(","))
    if len(in_subs) != len(shapes):
        raise BadSubscript(
                f"{len(in_subs)} subscript groups for {len(shapes)} operands")
    extent_of: dict[str, int] = {}
    for sub, shape in zip(in_subs, shapes):
        if not sub.isalpha() and sub != "":
            raise BadSubscript(f"malformed subscript: {sub!r}")
        if len(sub) != len(shape):
            raise BadSubscript(
                    f"subscript {sub!r} has {len(sub)} letters for shape "
                    f"{shape}")
        for letter, extent in zip(sub, shape):
            if extent_of.setdefault(letter, extent) != extent:
                raise ShapeMismatch(
                        f"letter {letter!r} bound to extents "
                        f"{extent_of[letter]} and {extent}")
    if len(set(out_sub)) != len(out_sub):
        raise BadSubscript(f"repeated letter in output subscript: {out_sub!r}")
    for letter in out_sub:
        if letter not in extent_of:
            raise BadSubscript(
                    f"output letter {letter!r} does not appear in any input")
    return in_subs, out_sub, extent_of


@dataclass(frozen=True, eq=False)
class Concatenate(Array):
    """Joins arrays along an existing axis."""

    arrays: tuple[Array, ...]
    axis: int
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        if not self.arrays:
            raise ShapeMismatch("concatenate needs at least one array")
        first = self.arrays[0]
        if not 0 <= self.axis < first.rank:
            raise ShapeMismatch(f"axis {self.axis} out of range for rank "
                                f"{first.rank}")
        for a in self.arrays[1:]:
            if a.rank != first.rank:
                raise ShapeMismatch("concatenated arrays must share a rank")
            if a.dtype != first.dtype:
                raise DTypeMismatch("concatenated arrays must share a dtype")
            for ax in range(first.rank):
                if ax != self.axis and a.shape[ax] != first.shape[ax]:
                    raise ShapeMismatch(
                            f"extent mismatch on axis {ax}: "
                            f"{a.shape} vs {first.shape}")
        shape = list(first.shape)
        shape[self.axis] = sum(a.shape[self.axis] for a in self.arrays)
        self._set_type(tuple(shape), first.dtype)

    def _payload(self) -> tuple:
        return (self.axis,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return self.arrays


@dataclass(frozen=True, eq=False)
class Stack(Array):
    """Joins equal-shaped arrays along a new axis."""

    arrays: tuple[Array, ...]
    axis: int
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        if not self.arrays:
            raise ShapeMismatch("stack needs at least one array")
        first = self.arrays[0]
        if not 0 <= self.axis <= first.rank:
            raise ShapeMismatch(f"axis {self.axis} out of range for rank "
                                f"{first.rank}")
        for a in self.arrays[1:]:
            if a.shape != first.shape:
                raise ShapeMismatch("stacked arrays must share a shape")
            if a.dtype != first.dtype:
                raise DTypeMismatch("stacked arrays must share a dtype")
        shape = (first.shape[:self.axis] + (len(self.arrays),)
                 + first.shape[self.axis:])
        self._set_type(shape, first.dtype)

    def _payload(self) -> tuple:
        return (self.axis,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return self.arrays

# }}}


# {{{ functions and calls

@dataclass(frozen=True, eq=False)
class FunctionDefinition(Node):
    """A reusable sub-graph over private placeholders.

    ``returns`` names the result nodes.  The body may reference only the
    listed parameters; traversal of an enclosing graph treats the whole
    definition as one node.
    """

    name: str
    parameters: tuple[Placeholder, ...]
    returns: tuple[tuple[str, Array], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "returns",
                           tuple(sorted(self.returns, key=lambda kv: kv[0])))
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise LazeError(f"duplicate parameter names: {names}")
        if not self.returns:
            raise LazeError("function must return at least one array")
        allowed = set(names)
        for _, result in self.returns:
            for node in _reach_arrays(result):
                if isinstance(node, Placeholder) and node.name not in allowed:
                    raise LazeError(
                            f"function body references unknown placeholder "
                            f"{node.name!r}")

    @property
    def returns_dict(self) -> dict[str, Array]:
        return dict(self.returns)

    @property
    def parameter_dict(self) -> dict[str, Placeholder]:
        return {p.name: p for p in self.parameters}

    def _payload(self) -> tuple:
        return (self.name, tuple(name for name, _ in self.returns))

    def _children(self) -> tuple[Node, ...]:
        return self.parameters + tuple(node for _, node in self.returns)

    def traversal_children(self) -> tuple[Node, ...]:
        return ()


@dataclass(frozen=True, eq=False)
class Call(Node):
    """One application of a function definition to argument arrays."""

    function: FunctionDefinition
    args: tuple[tuple[str, Array], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "args",
                           tuple(sorted(self.args, key=lambda kv: kv[0])))
        params = self.function.parameter_dict
        got = [name for name, _ in self.args]
        if got != sorted(params):
            raise LazeError(f"call arguments {got} do not match parameters "
                            f"{sorted(params)}")
        for name, arg in self.args:
            p = params[name]
            if arg.shape != p.shape:
                raise ShapeMismatch(
                        f"argument {name!r} has shape {arg.shape}, parameter "
                        f"expects {p.shape}")
            if arg.dtype != p.dtype:
                raise DTypeMismatch(
                        f"argument {name!r} has dtype {arg.dtype}, parameter "
                        f"expects {p.dtype}")

    @property
    def args_dict(self) -> dict[str, Array]:
        return dict(self.args)

    def _payload(self) -> tuple:
        return (tuple(name for name, _ in self.args),)

    def _children(self) -> tuple[Node, ...]:
        return (self.function,) + tuple(node for _, node in self.args)


@dataclass(frozen=True, eq=False)
class CallResult(Array):
    """One named result of a call."""

    call: Call
    result: str
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        try:
            node = self.call.function.returns_dict[self.result]
        except KeyError:
            raise LazeError(f"function {self.call.function.name!r} has no "
                            f"result {self.result!r}") from None
        self._set_type(node.shape, node.dtype)

    def _payload(self) -> tuple:
        return (self.result,) + self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return (self.call,)

# }}}


# {{{ communication nodes

@dataclass(frozen=True, eq=False)
class Send(Node):
    """An outgoing message: ship *data* to rank *dest* under *tag*."""

    data: Array
    dest: int
    tag: int

    def _payload(self) -> tuple:
        return (self.dest, self.tag)

    def _children(self) -> tuple[Node, ...]:
        return (self.data,)


@dataclass(frozen=True, eq=False)
class SendWrapper(Array):
    """Pass-through that keeps a send reachable from an output.

    Evaluates to ``passthrough``; the attached send rides along in the
    graph so that reachability retains it.
    """

    passthrough: Array
    send: Send
    axis_tags: AxisTags | None = None
    materialized: bool = False

    def __post_init__(self) -> None:
        self._set_type(self.passthrough.shape, self.passthrough.dtype)

    def _payload(self) -> tuple:
        return self._tag_payload()

    def _children(self) -> tuple[Node, ...]:
        return (self.passthrough, self.send)

# }}}


# {{{ expression dtype inference

def infer_expr_dtype(expression: ex.Expr, input_dtypes: Sequence[DType],
                     ) -> DType:
    """Static element type of a scalar expression.

    Literal constants are weakly typed, as in numpy: they adopt the
    width of the array they meet, so ``2.0 * f32_array`` stays f32.
    Index variables are (strong) integers; division and the
    transcendental functions promote to floating point.
    """

    def combine(a: tuple[DType, bool], b: tuple[DType, bool],
                ) -> tuple[DType, bool]:
        (ta, wa), (tb, wb) = a, b
        if wa == wb:
            return promote(ta, tb), wa
        strong, weak = (tb, ta) if wa else (ta, tb)
        if weak in (DType.F32, DType.F64) and strong.is_integral:
            return DType.F64, False
        if weak == DType.I64 and strong == DType.BOOL:
            return DType.I64, False
        return strong, False

    def rec(e: ex.Expr) -> tuple[DType, bool]:
        if isinstance(e, ex.Const):
            if isinstance(e.value, bool):
                return DType.BOOL, True
            if isinstance(e.value, int):
                return DType.I64, True
            return DType.F64, True
        if isinstance(e, ex.Var):
            return DType.I64, False
        if isinstance(e, ex.Load):
            if isinstance(e.ref, int):
                return input_dtypes[e.ref], False
            raise LazeError("named loads have no dtype in graph expressions")
        if isinstance(e, ex.BinOp):
            if e.op in ex.COMPARISON_OPS:
                rec(e.left), rec(e.right)
                return DType.BOOL, False
            both = combine(rec(e.left), rec(e.right))
            if e.op == "truediv":
                return promote_to_float(both[0]), both[1]
            return both
        if isinstance(e, ex.UnOp):
            t, weak = rec(e.operand)
            if e.op in ("sqrt", "exp", "log"):
                return promote_to_float(t), False
            return t, weak
        if isinstance(e, ex.Where):
            rec(e.cond)
            return combine(rec(e.then), rec(e.otherwise))
        if isinstance(e, ex.Reduce):
            return rec(e.body)
        raise TypeError(f"not an expression: {e!r}")

    dtype, weak = rec(expression)
    return DType.F64 if weak and dtype == DType.F32 else dtype

# }}}


# {{{ graphs and traversal

def index_name(k: int) -> str:
    return f"i{k}"


def index_vars(rank: int) -> tuple[ex.Var, ...]:
    return tuple(ex.Var(index_name(k)) for k in range(rank))


class Graph:
    """A named collection of output nodes.

    Graph membership is reachability from the outputs; the same output
    order independent of insertion is ensured by sorting names.
    """

    def __init__(self, outputs: Mapping[str, Array]) -> None:
        for name, node in outputs.items():
            if not isinstance(node, Array):
                raise LazeError(f"output {name!r} is not an array node: "
                                f"{node!r}")
        self.outputs: tuple[tuple[str, Array], ...] = tuple(
                sorted(outputs.items(), key=lambda kv: kv[0]))

    @property
    def outputs_dict(self) -> dict[str, Array]:
        return dict(self.outputs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.outputs == other.outputs

    def __hash__(self) -> int:
        return hash(self.outputs)

    def __repr__(self) -> str:
        names = ", ".join(name for name, _ in self.outputs)
        return f"Graph({names}; {node_count(self)} nodes)"


def _reach_arrays(root: Array) -> Iterator[Node]:
    seen: set[Node] = set()
    stack: list[Node] = [root]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        yield node
        stack.extend(node.traversal_children())


def all_nodes(graph: Graph) -> list[Node]:
    """Every reachable node, in deterministic first-visit order.

    Function definitions count as single nodes; their bodies are not
    graph members.
    """
    order: list[Node] = []
    seen: set[Node] = set()

    def visit(node: Node) -> None:
        if node in seen:
            return
        seen.add(node)
        order.append(node)
        for c in node.traversal_children():
            visit(c)

    for _, out in graph.outputs:
        visit(out)
    return order


def node_count(graph: Graph) -> int:
    return len(all_nodes(graph))


def first_use_order(graph: Graph) -> dict[Node, int]:
    return {node: k for k, node in enumerate(all_nodes(graph))}


def topo_order(graph: Graph) -> list[Node]:
    """Inputs-before-consumers order.

    Deterministic: among ready nodes, the one with the smallest
    (structural hash, first-use position) is emitted first.
    """
    nodes = all_nodes(graph)
    first_use = {node: k for k, node in enumerate(nodes)}
    remaining_deps: dict[Node, int] = {}
    consumers: dict[Node, list[Node]] = {n: [] for n in nodes}
    for n in nodes:
        cs = set(n.traversal_children())
        remaining_deps[n] = len(cs)
        for c in cs:
            consumers[c].append(n)
    ready = sorted((n for n in nodes if remaining_deps[n] == 0),
                   key=lambda n: (hash(n), first_use[n]))
    order: list[Node] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for consumer in consumers[node]:
            remaining_deps[consumer] -= 1
            if remaining_deps[consumer] == 0:
                ready.append(consumer)
                changed = True
        if changed:
            ready.sort(key=lambda n: (hash(n), first_use[n]))
    if len(order) != len(nodes):
        raise LazeError("graph contains a cycle")
    return order


def successor_counts(graph: Graph) -> dict[Node, int]:
    """Number of distinct consumers per node."""
    counts: dict[Node, set[Node]] = {}
    for n in all_nodes(graph):
        counts.setdefault(n, set())
        for c in set(n.traversal_children()):
            counts.setdefault(c, set()).add(n)
    return {n: len(s) for n, s in counts.items()}


def use_counts(graph: Graph) -> dict[Node, int]:
    """Number of uses per node, counting multiplicity per consumer."""
    counts: dict[Node, int] = {}
    for n in all_nodes(graph):
        counts.setdefault(n, 0)
        for c in n.traversal_children():
            counts[c] = counts.get(c, 0) + 1
    return counts


def uses_of(consumer: Node, producer: Node) -> int:
    return sum(1 for c in consumer.traversal_children() if c == producer)


def infer_shape(node: Array) -> Shape:
    """Re-derive a node's shape from its payload and inputs.

    Constructors already enforce consistency; this is the same inference
    exposed for direct checking.
    """
    return node.shape


def retag(node: Array, axis_tags: AxisTags) -> Array:
    """Same node with different per-axis tags."""
    import dataclasses
    return dataclasses.replace(node, axis_tags=axis_tags)


def set_materialized(node: Array, flag: bool = True) -> Array:
    """Same node with the materialization flag set to *flag*."""
    import dataclasses
    if node.materialized == flag:
        return node
    return dataclasses.replace(node, materialized=flag)


# {{{ input remapping

def replace_inputs(node: Node, rec: Callable[[Node], Node]) -> Node:
    """Rebuild *node* with every direct child replaced by ``rec(child)``.

    Payloads, tags, and flags are preserved; shapes and dtypes are
    re-inferred, so an incompatible replacement raises.
    """
    if isinstance(node, Data):
        return node
    if isinstance(node, Placeholder):
        return node
    if isinstance(node, Receive):
        return node
    if isinstance(node, IndexLambda):
        return IndexLambda(node.expression,
                           tuple(rec(b) for b in node.bindings),
                           node.shape, None, node.axis_tags,
                           node.materialized)
    if isinstance(node, Reshape):
        return Reshape(rec(node.array), node.newshape, node.axis_tags,
                       node.materialized)
    if isinstance(node, Indexing):
        return Indexing(rec(node.array),
                        tuple(rec(s) if isinstance(s, Array) else s
                              for s in node.selectors),
                        node.axis_tags, node.materialized)
    if isinstance(node, Einsum):
        return Einsum(node.subscripts, tuple(rec(a) for a in node.args),
                      node.axis_tags, node.materialized)
    if isinstance(node, Concatenate):
        return Concatenate(tuple(rec(a) for a in node.arrays), node.axis,
                           node.axis_tags, node.materialized)
    if isinstance(node, Stack):
        return Stack(tuple(rec(a) for a in node.arrays), node.axis,
                     node.axis_tags, node.materialized)
    if isinstance(node, FunctionDefinition):
        # bodies are rebuilt only by passes that do so explicitly
        return node
    if isinstance(node, Call):
        return Call(node.function,
                    tuple((name, rec(a)) for name, a in node.args))
    if isinstance(node, CallResult):
        return CallResult(rec(node.call), node.result, node.axis_tags,
                          node.materialized)
    if isinstance(node, Send):
        return Send(rec(node.data), node.dest, node.tag)
    if isinstance(node, SendWrapper):
        return SendWrapper(rec(node.passthrough), rec(node.send),
                           node.axis_tags, node.materialized)
    raise TypeError(f"unknown node type: {type(node).__name__}")

# }}}

# }}}
