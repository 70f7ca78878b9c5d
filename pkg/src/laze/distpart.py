"""Partitioning and execution of multi-rank graphs.

Each rank contributes a graph whose sends and receives name a peer and
a tag.  Matching sides pair into messages; a message depends on another
when the received value feeds, on the same rank, into the data being
sent.  Levelizing that dependency relation groups messages into
batches, and every rank's work splits into one part per batch boundary:
part ``p`` may consume messages of batches below ``p`` and must produce
everything shipped in batch ``p``.  Parts are ordinary single-process
graphs connected by generated placeholders, so each compiles through
the standard pipeline.  A small event loop executes all ranks in one
process, moving messages through an in-memory transport; it detects
stuck configurations and reports exactly which messages never arrived.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .adfg import (
    Array, Call, CallResult, Data, DType, Graph, Node, Placeholder, Receive,
    Send, SendWrapper, Shape, all_nodes, topo_order,
)
from .errors import (
    CircularCommunication, DeadlockDetected, InfeasiblePlacement, LazeError,
    MismatchedCommunication,
)
from .frontend import eager_eval
from .graph_passes import PassConfig, PassLog

CommKey = "tuple[int, int, int]"        # (source, dest, tag)

LATEST = "latest"
EARLIEST = "earliest"


# {{{ message matching and batching

@dataclass(frozen=True)
class CommOp:
    """One matched message."""

    source: int
    dest: int
    tag: int
    shape: Shape
    dtype: DType

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.source, self.dest, self.tag)


@dataclass(frozen=True)
class CommPlan:
    """All messages of a multi-rank program with their batch levels."""

    ops: tuple[CommOp, ...]
    batch_of: Mapping[tuple[int, int, int], int]
    edges: tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...]

    @property
    def num_batches(self) -> int:
        return 1 + max(self.batch_of.values(), default=-1)


def _value_children(node: Node) -> tuple[Node, ...]:
    """Dataflow inputs of a node, skipping message payload boundaries."""
    if isinstance(node, SendWrapper):
        return (node.passthrough,)
    if isinstance(node, CallResult):
        return (node.call,)
    if isinstance(node, Call):
        return tuple(a for _, a in node.args)
    if isinstance(node, Send):
        return (node.data,)
    if isinstance(node, Array):
        return node.traversal_children()
    return ()


def _reachable(roots: Iterable[Node]) -> set[Node]:
    seen: set[Node] = set()
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(_value_children(n))
    return seen


def _rank_comms(graph: Graph, rank: int,
                ) -> tuple[dict[tuple, Send], dict[tuple, Receive]]:
    sends: dict[tuple, Send] = {}
    receives: dict[tuple, Receive] = {}
    duplicates = []
    for n in all_nodes(graph):
        if isinstance(n, Send):
            key = (rank, n.dest, n.tag)
            if n.dest == rank:
                raise MismatchedCommunication(
                        f"rank {rank} sends to itself under tag {n.tag}",
                        keys=(key,))
            if key in sends and sends[key] is not n:
                duplicates.append(key)
            sends[key] = n
        elif isinstance(n, Receive):
            key = (n.source, rank, n.tag)
            if n.source == rank:
                raise MismatchedCommunication(
                        f"rank {rank} receives from itself under tag "
                        f"{n.tag}", keys=(key,))
            if key in receives and receives[key] is not n:
                duplicates.append(key)
            receives[key] = n
    if duplicates:
        raise MismatchedCommunication(
                f"rank {rank} reuses message keys: {sorted(duplicates)}",
                keys=tuple(sorted(duplicates)))
    return sends, receives


def extract_comm_graph(rank_graphs: Sequence[Graph]) -> CommPlan:
    """Pair sends with receives and levelize their dependencies.

    Messages with no matching peer, duplicated keys, or disagreeing
    shapes raise :class:`~laze.errors.MismatchedCommunication` naming
    the offending ``(source, dest, tag)`` triples; dependency cycles
    raise :class:`~laze.errors.CircularCommunication`.
    """
    sends: dict[tuple, Send] = {}
    receives: dict[tuple, Receive] = {}
    for rank, graph in enumerate(rank_graphs):
        s, r = _rank_comms(graph, rank)
        sends.update(s)
        receives.update(r)

    bad_rank = sorted(
            k for k in set(sends) | set(receives)
            if not (0 <= k[0] < len(rank_graphs)
                    and 0 <= k[1] < len(rank_graphs)))
    if bad_rank:
        raise MismatchedCommunication(
                f"messages name ranks outside 0..{len(rank_graphs) - 1}: "
                f"{bad_rank}", keys=tuple(bad_rank))
    unpaired = sorted(set(sends) ^ set(receives))
    if unpaired:
        raise MismatchedCommunication(
                f"messages without a matching peer: {unpaired}",
                keys=tuple(unpaired))
    for key, send in sends.items():
        recv = receives[key]
        if send.data.shape != recv.shape or send.data.dtype != recv.dtype:
            raise MismatchedCommunication(
                    f"message {key} sends {send.data.dtype.value}"
                    f"{send.data.shape} into {recv.dtype.value}{recv.shape}",
                    keys=(key,))

    ops = tuple(CommOp(key[0], key[1], key[2], send.data.shape,
                       send.data.dtype)
                for key, send in sorted(sends.items()))

    edges = []
    for rank, graph in enumerate(rank_graphs):
        local_sends = [(k, s) for k, s in sends.items() if k[0] == rank]
        local_recvs = [(k, r) for k, r in receives.items() if k[1] == rank]
        for skey, send in local_sends:
            ancestors = _reachable([send.data])
            for rkey, recv in local_recvs:
                if recv in ancestors:
                    edges.append((rkey, skey))

    batch_of: dict[tuple, int] = {}
    preds: dict[tuple, list[tuple]] = {op.key: [] for op in ops}
    for a, b in edges:
        preds[b].append(a)
    pending = {op.key for op in ops}
    while pending:
        placed = set()
        for key in sorted(pending):
            if all(p in batch_of for p in preds[key]):
                batch_of[key] = 1 + max(
                        (batch_of[p] for p in preds[key]), default=-1)
                placed.add(key)
        if not placed:
            raise CircularCommunication(
                    f"messages depend on each other in a cycle: "
                    f"{sorted(pending)}")
        pending -= placed

    return CommPlan(ops=ops, batch_of=batch_of, edges=tuple(sorted(edges)))

# }}}


# {{{ per-rank partitioning

def receive_input_name(source: int, tag: int) -> str:
    return f"_recv_{source}_{tag}"


def send_output_name(dest: int, tag: int) -> str:
    return f"_send_{dest}_{tag}"


@dataclass(frozen=True)
class PartIo:
    """How one part of a rank connects to its surroundings."""

    receive_inputs: tuple[tuple[str, int, int, int], ...]
    boundary_inputs: tuple[str, ...]
    binding_inputs: tuple[str, ...]
    send_outputs: tuple[tuple[str, int, int, int], ...]
    boundary_outputs: tuple[str, ...]
    user_outputs: tuple[str, ...]


@dataclass(frozen=True)
class RankPlan:
    """One rank's graph cut into per-batch parts."""

    rank: int
    parts: tuple[Graph, ...]
    io: tuple[PartIo, ...]
    num_batches: int


def _resolve(node: Array) -> Array:
    while isinstance(node, SendWrapper):
        node = node.passthrough
    return node


def plan_parts(graph: Graph, rank: int, plan: CommPlan,
               assignment: str = LATEST) -> RankPlan:
    """Cut one rank's graph into ``num_batches + 1`` parts.

    Every node is placed into the latest (or earliest) slot compatible
    with its receives arriving, its sends departing on schedule, and
    its consumers' placements; an empty window raises
    :class:`~laze.errors.InfeasiblePlacement`.
    """
    if assignment not in (LATEST, EARLIEST):
        raise LazeError(f"unknown slot assignment {assignment!r}")
    num_batches = plan.num_batches
    last_slot = num_batches

    nodes = [n for n in topo_order(graph)]
    arrays = [n for n in nodes if isinstance(n, Array)]
    send_nodes = [n for n in nodes if isinstance(n, Send)]

    lower: dict[Array, int] = {}
    for n in arrays:
        if isinstance(n, Receive):
            lower[n] = plan.batch_of[(n.source, rank, n.tag)] + 1
            continue
        lower[n] = max((lower[c] for c in _dataflow_inputs(n)), default=0)

    upper: dict[Array, int] = {n: last_slot for n in arrays}
    for s in send_nodes:
        batch = plan.batch_of[(rank, s.dest, s.tag)]
        data = _resolve(s.data)
        upper[data] = min(upper[data], batch)
    for n in reversed(arrays):
        for c in _dataflow_inputs(n):
            upper[c] = min(upper[c], upper[n])

    slot: dict[Array, int] = {}
    for n in arrays:
        if upper[n] < lower[n]:
            raise InfeasiblePlacement(
                    f"rank {rank}: {type(n).__name__} must run at slot "
                    f">= {lower[n]} but <= {upper[n]}")
        slot[n] = upper[n] if assignment == LATEST else lower[n]

    # exports: nodes read from a later slot than their own
    needs_export: dict[Array, set[int]] = {}
    for n in arrays:
        if isinstance(n, (Placeholder, Data, Receive, SendWrapper)):
            continue
        for c in _dataflow_inputs(n):
            if isinstance(c, (Placeholder, Data, Receive)):
                continue
            if slot[c] < slot[n]:
                needs_export.setdefault(c, set()).add(slot[n])

    boundary_name: dict[Array, str] = {}
    counters = [0] * (last_slot + 1)
    for n in arrays:
        if n in needs_export:
            p = slot[n]
            boundary_name[n] = f"_b{p}_{counters[p]}"
            counters[p] += 1

    user_outputs = [(name, _resolve(node)) for name, node in graph.outputs]
    sends_at: dict[int, list[tuple[Send, Array]]] = {}
    for s in send_nodes:
        data = _resolve(s.data)
        sends_at.setdefault(slot[data], []).append((s, data))

    parts: list[Graph] = []
    ios: list[PartIo] = []
    for p in range(last_slot + 1):
        memo: dict[Array, Array] = {}
        recv_used: dict[tuple, tuple[str, int, int, int]] = {}
        boundary_used: set[str] = set()
        bindings_used: set[str] = set()

        def build(n: Array, root: bool = False) -> Array:
            n = _resolve(n)
            if isinstance(n, Receive):
                key = (n.source, rank, n.tag)
                name = receive_input_name(n.source, n.tag)
                recv_used[key] = (name, n.source, n.tag,
                                  plan.batch_of[key])
                return Placeholder(name, n.shape, n.dtype, n.axis_tags)
            if isinstance(n, Placeholder):
                bindings_used.add(n.name)
                return n
            if isinstance(n, Data):
                return n
            if not root and slot[n] < p:
                name = boundary_name[n]
                boundary_used.add(name)
                return Placeholder(name, n.shape, n.dtype, n.axis_tags)
            if n in memo:
                return memo[n]
            from .adfg import replace_inputs
            rebuilt = replace_inputs(n, lambda c: build(c))
            memo[n] = rebuilt
            return rebuilt

        outputs: dict[str, Array] = {}
        send_io = []
        for s, data in sorted(sends_at.get(p, ()),
                              key=lambda sd: (sd[0].dest, sd[0].tag)):
            name = send_output_name(s.dest, s.tag)
            outputs[name] = build(data, root=True)
            send_io.append((name, s.dest, s.tag,
                            plan.batch_of[(rank, s.dest, s.tag)]))
        boundary_io = []
        for n, bname in boundary_name.items():
            if slot[n] == p:
                outputs[bname] = build(n, root=True)
                boundary_io.append(bname)
        user_io = []
        for name, node in user_outputs:
            if isinstance(node, (Placeholder, Data, Receive)) \
                    or slot[node] == p:
                if isinstance(node, (Placeholder, Data, Receive)) \
                        and p != last_slot:
                    continue
                outputs[name] = build(node, root=True)
                user_io.append(name)

        parts.append(Graph(outputs))
        ios.append(PartIo(
                receive_inputs=tuple(sorted(recv_used.values())),
                boundary_inputs=tuple(sorted(boundary_used)),
                binding_inputs=tuple(sorted(bindings_used)),
                send_outputs=tuple(send_io),
                boundary_outputs=tuple(boundary_io),
                user_outputs=tuple(sorted(user_io))))

    return RankPlan(rank=rank, parts=tuple(parts), io=tuple(ios),
                    num_batches=num_batches)


def _dataflow_inputs(n: Node) -> list[Array]:
    out = []
    for c in _value_children(n):
        if isinstance(c, Call):
            out.extend(_resolve(a) for _, a in c.args)
        elif isinstance(c, Array):
            out.append(_resolve(c))
    return out


def partition(rank_graphs: Sequence[Graph],
              assignment: str = LATEST) -> list[RankPlan]:
    """Split every rank's graph along the message batch boundaries."""
    plan = extract_comm_graph(rank_graphs)
    return [plan_parts(g, rank, plan, assignment)
            for rank, g in enumerate(rank_graphs)]

# }}}


# {{{ transport and event loop

class InProcessTransport:
    """Mailbox keyed by ``(source, dest, tag)``."""

    def __init__(self) -> None:
        self.mail: dict[tuple, np.ndarray] = {}

    def post(self, source: int, dest: int, tag: int,
             value: np.ndarray) -> bool:
        self.mail[(source, dest, tag)] = value
        return True

    def fetch(self, source: int, dest: int, tag: int) -> np.ndarray | None:
        return self.mail.pop((source, dest, tag), None)

    def has(self, source: int, dest: int, tag: int) -> bool:
        return (source, dest, tag) in self.mail


class DroppingTransport(InProcessTransport):
    """Silently loses the configured messages; for fault testing."""

    def __init__(self, drop: Iterable[tuple]) -> None:
        super().__init__()
        self.drop = set(drop)
        self.dropped: list[tuple] = []

    def post(self, source: int, dest: int, tag: int,
             value: np.ndarray) -> bool:
        if (source, dest, tag) in self.drop:
            self.dropped.append((source, dest, tag))
            return False
        return super().post(source, dest, tag, value)


class DistributedExecutor:
    """Runs every rank's parts in one process.

    Ranks advance part by part; each sweep visits them in a seeded
    random order, so any schedule sensitivity shows up as seed
    dependence.  Messages travel through the transport as soon as their
    payload part finishes.  Received and boundary values are reference
    counted and dropped after their last consumer, tracking the peak
    number of live bytes per rank.  A sweep without progress raises
    :class:`~laze.errors.DeadlockDetected` listing the messages that
    never arrived.
    """

    def __init__(self, plans: Sequence[RankPlan],
                 config: PassConfig | None = None,
                 transport: InProcessTransport | None = None,
                 seed: int = 0,
                 log: PassLog | None = None) -> None:
        from .pipeline import compile_graph
        self.plans = list(plans)
        self.config = config or PassConfig()
        self.transport = transport or InProcessTransport()
        self.seed = seed
        self.trace: list[str] = []
        self.peak_live_bytes = [0] * len(self.plans)
        self.compiled = [
                [compile_graph(part, self.config, log)
                 if part.outputs else None
                 for part in plan.parts]
                for plan in self.plans]

    def execute(self, bindings: Sequence[Mapping[str, np.ndarray]],
                ) -> list[dict[str, np.ndarray]]:
        if len(bindings) != len(self.plans):
            raise LazeError(f"{len(self.plans)} ranks need "
                            f"{len(self.plans)} binding sets")
        nranks = len(self.plans)
        rng = np.random.default_rng(self.seed)

        # remaining consumers of every held value, per rank
        refcount: list[dict[str, int]] = [dict() for _ in range(nranks)]
        for r, plan in enumerate(self.plans):
            for io in plan.io:
                for name, *_ in io.receive_inputs:
                    refcount[r][name] = refcount[r].get(name, 0) + 1
                for name in io.boundary_inputs:
                    refcount[r][name] = refcount[r].get(name, 0) + 1

        env: list[dict[str, np.ndarray]] = [dict() for _ in range(nranks)]
        live = [0] * nranks
        results: list[dict[str, np.ndarray]] = [dict()
                                                for _ in range(nranks)]
        cursor = [0] * nranks
        total_parts = [len(p.parts) for p in self.plans]

        def note_live(r: int) -> None:
            self.peak_live_bytes[r] = max(self.peak_live_bytes[r], live[r])

        while any(cursor[r] < total_parts[r] for r in range(nranks)):
            order = list(range(nranks))
            rng.shuffle(order)
            progressed = False
            for r in order:
                p = cursor[r]
                if p >= total_parts[r]:
                    continue
                io = self.plans[r].io[p]
                waiting = [
                        (source, r, tag)
                        for name, source, tag, _ in io.receive_inputs
                        if name not in env[r]
                        and not self.transport.has(source, r, tag)]
                if waiting:
                    continue
                for name, source, tag, _ in io.receive_inputs:
                    if name not in env[r]:
                        value = self.transport.fetch(source, r, tag)
                        assert value is not None
                        env[r][name] = value
                        live[r] += value.nbytes
                        note_live(r)
                part_bindings = {}
                for name in io.binding_inputs:
                    if name not in bindings[r]:
                        raise LazeError(
                                f"rank {r}: missing binding {name!r}")
                    part_bindings[name] = bindings[r][name]
                for name, *_ in io.receive_inputs:
                    part_bindings[name] = env[r][name]
                for name in io.boundary_inputs:
                    part_bindings[name] = env[r][name]

                compiled = self.compiled[r][p]
                out = compiled.execute(part_bindings) if compiled else {}

                for name, dest, tag, batch in io.send_outputs:
                    value = out[name]
                    if self.transport.post(r, dest, tag, value):
                        self.trace.append(
                                f"batch={batch} src={r} dst={dest} "
                                f"tag={tag} bytes={value.nbytes}")
                for name in io.boundary_outputs:
                    env[r][name] = out[name]
                    live[r] += out[name].nbytes
                    note_live(r)
                for name in io.user_outputs:
                    results[r][name] = out[name]

                consumed = [name for name, *_ in io.receive_inputs] \
                    + list(io.boundary_inputs)
                for name in consumed:
                    refcount[r][name] -= 1
                    if refcount[r][name] == 0:
                        live[r] -= env[r][name].nbytes
                        del env[r][name]
                cursor[r] = p + 1
                progressed = True

            if not progressed:
                missing = sorted({
                        (source, r, tag)
                        for r in range(nranks)
                        if cursor[r] < total_parts[r]
                        for name, source, tag, _ in
                        self.plans[r].io[cursor[r]].receive_inputs
                        if name not in env[r]
                        and not self.transport.has(source, r, tag)})
                raise DeadlockDetected(
                        f"no rank can make progress; missing messages: "
                        f"{missing}", missing=tuple(missing))
        return results

# }}}


# {{{ whole-program oracle

def eager_eval_distributed(
        rank_graphs: Sequence[Graph],
        bindings: Sequence[Mapping[str, np.ndarray]],
        ) -> list[dict[str, np.ndarray]]:
    """Evaluate all ranks at once, resolving messages symbolically.

    The reference semantics for the distributed executor: every receive
    takes the value of the matching send's payload, evaluated on the
    sending rank.
    """
    extract_comm_graph(rank_graphs)      # validate pairing up front

    send_data: dict[tuple, Array] = {}
    for rank, graph in enumerate(rank_graphs):
        for n in all_nodes(graph):
            if isinstance(n, Send):
                send_data[(rank, n.dest, n.tag)] = n.data

    memos: list[dict] = [dict() for _ in rank_graphs]
    in_flight: set[tuple] = set()

    def resolver_for(rank: int) -> Callable[[Receive], np.ndarray]:
        def resolve(recv: Receive) -> np.ndarray:
            key = (recv.source, rank, recv.tag)
            if key in in_flight:
                raise CircularCommunication(
                        f"message {key} depends on itself")
            in_flight.add(key)
            try:
                src = recv.source
                return eager_eval(
                        send_data[key], bindings[src],
                        receive_resolver=resolver_for(src),
                        _memo=memos[src])
            finally:
                in_flight.discard(key)
        return resolve

    out = []
    for rank, graph in enumerate(rank_graphs):
        values = {}
        for name, node in graph.outputs:
            values[name] = eager_eval(
                    node, bindings[rank],
                    receive_resolver=resolver_for(rank),
                    _memo=memos[rank])
        out.append(values)
    return out

# }}}
