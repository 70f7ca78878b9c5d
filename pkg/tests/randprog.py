"""Random program generation shared by the fuzz and property tests.

Graphs are grown bottom-up through the tracing frontend: a pool of
lazily captured arrays is extended one operation at a time, drawing
operations so that every node kind short of communication shows up.
Construction never produces an invalid graph; shapes are checked
before an operation is attempted and incompatible draws fall through
to an elementwise combination, which is always available.
"""

from __future__ import annotations

import numpy as np

from laze.adfg import Array, Graph, set_materialized
from laze.frontend import ArrayContext, LazyArray

MAX_EXTENT = 8


# {{{ helpers

def _random_shape(rng: np.random.Generator, max_rank: int = 2,
                  max_extent: int = MAX_EXTENT) -> tuple[int, ...]:
    rank = int(rng.integers(0, max_rank + 1))
    return tuple(int(rng.integers(1, max_extent + 1)) for _ in range(rank))


def _broadcast_result(sa: tuple[int, ...],
                      sb: tuple[int, ...]) -> tuple[int, ...] | None:
    """Trailing-aligned broadcast shape, or None if incompatible."""
    out = []
    for a, b in zip(reversed(sa), reversed(sb)):
        if a == b or b == 1:
            out.append(a)
        elif a == 1:
            out.append(b)
        else:
            return None
    longer = sa if len(sa) >= len(sb) else sb
    return longer[:len(longer) - len(out)] + tuple(reversed(out))


def _factorize(rng: np.random.Generator, size: int) -> tuple[int, ...]:
    """A random shape of 1 or 2 axes with the given element count."""
    if size > 1 and rng.random() < 0.6:
        divisors = [d for d in range(1, size + 1) if size % d == 0]
        d = int(rng.choice(divisors))
        return (d, size // d)
    return (size,)

# }}}


# {{{ single-process graphs

class _Pool:
    """Grows one graph; every produced array stays a candidate input."""

    def __init__(self, ctx: ArrayContext, rng: np.random.Generator,
                 max_extent: int) -> None:
        self.ctx = ctx
        self.rng = rng
        self.max_extent = max_extent
        self.arrays: list[LazyArray] = []
        self.bindings: dict[str, np.ndarray] = {}
        self.n_placeholders = 0
        self.n_tags = 0

    def add_placeholder(self, max_rank: int = 2) -> LazyArray:
        name = f"in{self.n_placeholders}"
        self.n_placeholders += 1
        shape = _random_shape(self.rng, max_rank, self.max_extent)
        arr = self.ctx.placeholder(name, shape, "f64")
        self.bindings[name] = self.rng.standard_normal(shape)
        self.arrays.append(arr)
        return arr

    def add_data(self) -> LazyArray:
        shape = _random_shape(self.rng, 2, self.max_extent)
        arr = self.ctx.from_numpy(self.rng.standard_normal(shape))
        self.arrays.append(arr)
        return arr

    def pick(self, want_rank: int | None = None) -> LazyArray | None:
        pool = self.arrays
        if want_rank is not None:
            pool = [a for a in pool if len(a.shape) == want_rank]
        if not pool:
            return None
        return pool[int(self.rng.integers(0, len(pool)))]

    def pick_pair(self) -> tuple[LazyArray, LazyArray] | None:
        """Two arrays whose shapes broadcast against each other."""
        for _ in range(8):
            a = self.pick()
            b = self.pick()
            if _broadcast_result(a.shape, b.shape) is not None:
                return a, b
        return None

    # {{{ operation draws

    def op_elementwise(self) -> LazyArray | None:
        pair = self.pick_pair()
        if pair is None:
            return None
        a, b = pair
        op = self.rng.choice(["add", "sub", "mul", "max", "min"])
        np_ = self.ctx.np
        fn = {"add": np_.add, "sub": np_.subtract, "mul": np_.multiply,
              "max": np_.maximum, "min": np_.minimum}[str(op)]
        if self.rng.random() < 0.2:
            return fn(a, float(self.rng.standard_normal()))
        return fn(a, b)

    def op_unary(self) -> LazyArray | None:
        a = self.pick()
        return -a if self.rng.random() < 0.5 else abs(a)

    def op_where(self) -> LazyArray | None:
        pair = self.pick_pair()
        if pair is None:
            return None
        a, b = pair
        cond = self.ctx.np.less(a, float(self.rng.standard_normal()))
        return self.ctx.np.where(cond, a, b)

    def op_reshape(self) -> LazyArray | None:
        a = self.pick()
        size = int(np.prod(a.shape, dtype=np.int64))
        return a.reshape(*_factorize(self.rng, size))

    def op_concatenate(self) -> LazyArray | None:
        a = self.pick()
        if not a.shape:
            return None
        axis = int(self.rng.integers(0, len(a.shape)))
        peers = [b for b in self.arrays
                 if b.shape[:axis] == a.shape[:axis]
                 and b.shape[axis + 1:] == a.shape[axis + 1:]
                 and len(b.shape) == len(a.shape)]
        b = peers[int(self.rng.integers(0, len(peers)))]
        return self.ctx.np.concatenate([a, b], axis=axis)

    def op_stack(self) -> LazyArray | None:
        a = self.pick()
        if len(a.shape) >= 2:
            return None
        peers = [b for b in self.arrays if b.shape == a.shape]
        b = peers[int(self.rng.integers(0, len(peers)))]
        axis = int(self.rng.integers(0, len(a.shape) + 1))
        return self.ctx.np.stack([a, b], axis=axis)

    def op_index(self) -> LazyArray | None:
        a = self.pick()
        if not a.shape:
            return None
        selection = []
        gathered = False
        for extent in a.shape:
            kind = self.rng.random()
            if kind < 0.3:
                selection.append(int(self.rng.integers(0, extent)))
            elif kind < 0.8 or gathered:
                start = int(self.rng.integers(0, extent))
                stop = int(self.rng.integers(start + 1, extent + 1))
                step = int(self.rng.integers(1, 3))
                selection.append(slice(start, stop, step))
            else:
                npick = int(self.rng.integers(1, self.max_extent + 1))
                idx = self.rng.integers(0, extent, npick)
                selection.append(self.ctx.from_numpy(idx))
                gathered = True
        picked = a[tuple(selection)]
        if not picked.shape and self.rng.random() < 0.5:
            return None
        return picked

    def op_einsum(self) -> LazyArray | None:
        np_ = self.ctx.np
        mats = [a for a in self.arrays if len(a.shape) == 2]
        draw = self.rng.random()
        if draw < 0.4 and mats:
            a = mats[int(self.rng.integers(0, len(mats)))]
            pairs = [b for b in mats if b.shape[0] == a.shape[1]]
            if pairs:
                b = pairs[int(self.rng.integers(0, len(pairs)))]
                return np_.einsum("ij,jk->ik", a, b)
        if draw < 0.6 and mats:
            a = mats[int(self.rng.integers(0, len(mats)))]
            return np_.einsum("ij->ji", a)
        a = self.pick()
        if not a.shape:
            return None
        axis = int(self.rng.integers(0, len(a.shape)))
        return np_.sum(a, axis=axis)

    def op_call(self) -> LazyArray | None:
        a = self.pick()
        b = self.pick(want_rank=len(a.shape))
        if b is None or b.shape != a.shape:
            return None

        def body(u, v):
            return {"out": u * v + u}

        fn = self.ctx.outline(body)
        first = fn(a, b)
        if self.rng.random() < 0.5:
            second = fn(b, a)
            return first + second
        return first

    # }}}

    def grow(self, depth: int) -> None:
        draws = [
            (self.op_elementwise, 7),
            (self.op_unary, 2),
            (self.op_where, 2),
            (self.op_reshape, 2),
            (self.op_concatenate, 2),
            (self.op_stack, 1),
            (self.op_index, 2),
            (self.op_einsum, 2),
            (self.op_call, 1),
        ]
        ops = [fn for fn, w in draws for _ in range(w)]
        for _ in range(depth):
            fn = ops[int(self.rng.integers(0, len(ops)))]
            arr = fn()
            if arr is None:
                arr = self.op_elementwise()
            if arr is None:
                continue
            node = arr.node
            if self.rng.random() < 0.15 and not isinstance(node, Array):
                continue
            if self.rng.random() < 0.1:
                node = set_materialized(node, True)
                arr = LazyArray(self.ctx, node)
            if self.rng.random() < 0.1 and node.shape:
                # unique keys per event so propagated tags union rather
                # than conflict
                axis = int(self.rng.integers(0, len(node.shape)))
                arr = arr.tagged(axis, f"mark{self.n_tags}", "set")
                self.n_tags += 1
            self.arrays.append(arr)


def random_graph(seed: int, depth: int = 12, max_extent: int = MAX_EXTENT,
                 ) -> tuple[Graph, dict[str, np.ndarray]]:
    """A random single-process graph plus matching input bindings."""
    rng = np.random.default_rng(seed)
    ctx = ArrayContext()
    pool = _Pool(ctx, rng, max_extent)
    for _ in range(int(rng.integers(2, 5))):
        pool.add_placeholder()
    if rng.random() < 0.5:
        pool.add_data()
    pool.grow(depth)

    non_leaf = pool.arrays[pool.n_placeholders:] or pool.arrays
    n_out = int(rng.integers(1, min(3, len(non_leaf)) + 1))
    chosen = rng.choice(len(non_leaf), size=n_out, replace=False)
    outputs = {f"r{k}": non_leaf[int(j)].node
               for k, j in enumerate(chosen)}
    return Graph(outputs), pool.bindings

# }}}


# {{{ multi-rank programs

def random_rank_graphs(seed: int, num_ranks: int | None = None,
                       ) -> tuple[list[Graph], list[dict[str, np.ndarray]]]:
    """Random per-rank graphs wired by an acyclic message plan.

    Every payload only draws on values the source rank holds before
    the message is posted, so the resulting plan always batches and
    the simulated execution cannot deadlock.
    """
    rng = np.random.default_rng(seed)
    ctx = ArrayContext()
    if num_ranks is None:
        num_ranks = int(rng.integers(2, 5))
    shape = (4,)

    pools: list[list[LazyArray]] = []
    bindings: list[dict[str, np.ndarray]] = []
    for r in range(num_ranks):
        u = ctx.placeholder(f"u{r}", shape, "f64")
        pools.append([u])
        bindings.append({f"u{r}": rng.standard_normal(shape)})

    def combine(rank: int) -> LazyArray:
        pool = pools[rank]
        a = pool[int(rng.integers(0, len(pool)))]
        b = pool[int(rng.integers(0, len(pool)))]
        op = rng.choice(["add", "mul", "max"])
        fn = {"add": ctx.np.add, "mul": ctx.np.multiply,
              "max": ctx.np.maximum}[str(op)]
        return fn(a, b)

    sends: list[list[tuple[LazyArray, int, int]]] = [
            [] for _ in range(num_ranks)]
    num_messages = int(rng.integers(1, 6))
    for tag in range(num_messages):
        source = int(rng.integers(0, num_ranks))
        dest = int(rng.integers(0, num_ranks - 1))
        if dest >= source:
            dest += 1
        payload = combine(source)
        sends[source].append((payload, dest, tag))
        received = ctx.receive(source, tag, shape, "f64")
        pools[dest].append(received)

    graphs = []
    for r in range(num_ranks):
        # fold every received value in so each receive is reachable
        out = pools[r][0]
        for arr in pools[r][1:]:
            out = out + arr
        for payload, dest, tag in sends[r]:
            out = ctx.send(payload, dest=dest, tag=tag, stapled_to=out)
        graphs.append(Graph({"out": out.node}))
    return graphs, bindings

# }}}

# vim: foldmethod=marker
