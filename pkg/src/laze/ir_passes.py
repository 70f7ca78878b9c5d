"""Transformations on scalar-loop programs.

All passes are pure functions from program to program and keep the
validator green.  Loop fusion groups nests with matching loop
signatures when every dependency between group members is elementwise
and no dependency path would leave and re-enter the group; array
contraction turns single-use nest-local temporaries into scalar
registers; the parallel tagger marks loop variables that carry no
cross-iteration dependency.
"""

from __future__ import annotations

from dataclasses import replace

from . import expr as ex
from .adfg import merge_axis_tags
from .errors import TagConflict
from .graph_passes import PassConfig, PassLog
from .scalar_ir import (
    TEMPORARY, CallStep, IrProgram, LoopNest, LoopVar, Statement, validate,
)


# {{{ step dependency helpers

def _scalar_targets(nest: LoopNest) -> set[str]:
    return {s.target for s in nest.body if s.scalar}


def _step_reads(step: LoopNest | CallStep) -> set[str]:
    if isinstance(step, CallStep):
        return {caller for _, caller in step.arg_map}
    scalars = _scalar_targets(step)
    return {load.ref
            for stmt in step.body
            for load in ex.loads_in(stmt.rhs)
            if load.ref not in scalars}


def _step_writes(step: LoopNest | CallStep) -> set[str]:
    if isinstance(step, CallStep):
        return {caller for _, caller in step.result_map}
    return {s.target for s in step.body if not s.scalar}


def _step_edges(steps: tuple[LoopNest | CallStep, ...],
                ) -> list[set[int]]:
    """``succ[i]`` holds the steps that read what step ``i`` writes."""
    writer: dict[str, int] = {}
    for i, step in enumerate(steps):
        for name in _step_writes(step):
            writer[name] = i
    succ: list[set[int]] = [set() for _ in steps]
    for j, step in enumerate(steps):
        for name in _step_reads(step):
            i = writer.get(name)
            if i is not None and i != j:
                succ[i].add(j)
    return succ

# }}}


# {{{ loop fusion

def _identity_indices(nest: LoopNest) -> tuple[ex.Expr, ...]:
    return tuple(ex.Var(v.name) for v in nest.loop_vars)


def _elementwise_against(nest: LoopNest, produced: set[str]) -> bool:
    """True if every read of ``produced`` is at the identity index."""
    identity = _identity_indices(nest)
    for stmt in nest.body:
        for load in ex.loads_in(stmt.rhs):
            if load.ref in produced and load.indices != identity:
                return False
    return True


def _merged_vars(a: tuple[LoopVar, ...],
                 b: tuple[LoopVar, ...]) -> tuple[LoopVar, ...]:
    """Per-position union of loop tags; raises on conflicting values."""
    return tuple(
            LoopVar(va.name, va.extent,
                    merge_axis_tags(va.tags, vb.tags, what=va.name))
            for va, vb in zip(a, b))


def _fuse_once(program: IrProgram, log: PassLog | None) -> IrProgram:
    steps = program.steps
    succ = _step_edges(steps)
    group_of = list(range(len(steps)))

    def members(gid: int) -> list[int]:
        return [i for i, g in enumerate(group_of) if g == gid]

    def group_succ() -> dict[int, set[int]]:
        out: dict[int, set[int]] = {g: set() for g in set(group_of)}
        for i, targets in enumerate(succ):
            for j in targets:
                if group_of[i] != group_of[j]:
                    out[group_of[i]].add(group_of[j])
        return out

    def path_avoiding_direct(src_gid: int, dst_gid: int) -> bool:
        gsucc = group_succ()
        frontier = [g for g in gsucc[src_gid] if g != dst_gid]
        seen = set(frontier)
        while frontier:
            g = frontier.pop()
            for s in gsucc[g]:
                if s not in seen:
                    seen.add(s)
                    frontier.append(s)
        return dst_gid in seen

    group_vars: dict[int, tuple[LoopVar, ...]] = {}
    for idx, step in enumerate(steps):
        if not isinstance(step, LoopNest):
            continue
        joined = False
        for gid in group_vars:
            lead = steps[gid]
            assert isinstance(lead, LoopNest)
            if lead.signature() != step.signature():
                continue
            if tuple(v.name for v in group_vars[gid]) \
                    != tuple(v.name for v in step.loop_vars):
                continue
            produced = set().union(
                    *(_step_writes(steps[m]) for m in members(gid)))
            if not _elementwise_against(step, produced):
                continue
            if path_avoiding_direct(gid, group_of[idx]):
                continue
            try:
                merged = _merged_vars(group_vars[gid], step.loop_vars)
            except TagConflict:
                continue
            group_of[idx] = gid
            group_vars[gid] = merged
            joined = True
            break
        if not joined:
            group_vars[idx] = step.loop_vars

    if all(group_of[i] == i for i in range(len(steps))):
        return program

    # emit groups in dependency order, ties by first original position
    gsucc = group_succ()
    gids = sorted(gsucc)
    pred_count = {g: 0 for g in gids}
    for g, targets in gsucc.items():
        for t in targets:
            pred_count[t] += 1
    ready = sorted(g for g in gids if pred_count[g] == 0)
    order: list[int] = []
    while ready:
        g = ready.pop(0)
        order.append(g)
        for t in sorted(gsucc[g]):
            pred_count[t] -= 1
            if pred_count[t] == 0:
                ready.append(t)
        ready.sort()
    assert len(order) == len(gids)

    new_steps: list[LoopNest | CallStep] = []
    for g in order:
        group_members = members(g)
        if len(group_members) == 1:
            step = steps[group_members[0]]
            if isinstance(step, LoopNest):
                step = replace(step, index=len(new_steps))
            new_steps.append(step)
            continue
        nests = [steps[m] for m in group_members]
        assert all(isinstance(n, LoopNest) for n in nests)
        body = tuple(stmt for n in nests for stmt in n.body)
        new_steps.append(LoopNest(len(new_steps), group_vars[g], body))
        if log is not None:
            log.note(f"fuse_loops: merged {len(nests)} nests over extents "
                     f"{nests[0].extents}")
    return replace(program, steps=tuple(new_steps))


def fuse_loops(program: IrProgram, log: PassLog | None = None) -> IrProgram:
    """Merge loop nests with equal signatures where legal.

    Legal means every value flowing between group members is consumed
    at the producing iteration and no dependency path leaves the group
    and returns.  Runs to a fixed point, so the pass is idempotent.
    """
    while True:
        new = _fuse_once(program, log)
        if new is program:
            validate(program)
            return program
        program = new

# }}}


# {{{ array contraction

def contract_arrays(program: IrProgram,
                    log: PassLog | None = None) -> IrProgram:
    """Replace nest-local single-use temporaries with scalar registers.

    A temporary qualifies when its only reads sit in the nest that
    writes it, after the write, at the identity index.  Its declaration
    is dropped and reads become register references.
    """
    output_arrays = {a for _, a in program.outputs}
    nest_of_write: dict[str, int] = {}
    write_pos: dict[str, int] = {}
    reads: dict[str, list[tuple[int, int, tuple[ex.Expr, ...]]]] = {}
    call_reads: set[str] = set()

    for si, step in enumerate(program.steps):
        if isinstance(step, CallStep):
            call_reads.update(caller for _, caller in step.arg_map)
            continue
        scalars = _scalar_targets(step)
        for pi, stmt in enumerate(step.body):
            if not stmt.scalar:
                nest_of_write[stmt.target] = si
                write_pos[stmt.target] = pi
            for load in ex.loads_in(stmt.rhs):
                if load.ref in scalars:
                    continue
                reads.setdefault(load.ref, []).append((si, pi, load.indices))

    decls = program.decls
    contracted: set[str] = set()
    for name, decl in decls.items():
        if decl.storage != TEMPORARY or name in output_arrays:
            continue
        if name in call_reads or name not in nest_of_write:
            continue
        si = nest_of_write[name]
        step = program.steps[si]
        assert isinstance(step, LoopNest)
        identity = _identity_indices(step)
        uses = reads.get(name, [])
        if not uses:
            continue
        if all(ri == si and rp > write_pos[name] and idx == identity
               for ri, rp, idx in uses):
            contracted.add(name)

    if not contracted:
        return program

    def rewrite(e: ex.Expr) -> ex.Expr:
        def to_register(load: ex.Load) -> ex.Expr:
            if load.ref in contracted:
                return ex.Load(load.ref, ())
            return ex.Load(load.ref, tuple(rewrite(i) for i in load.indices))
        return ex.substitute(e, {}, to_register)

    new_steps: list[LoopNest | CallStep] = []
    for step in program.steps:
        if isinstance(step, CallStep):
            new_steps.append(step)
            continue
        body = tuple(
                Statement(stmt.target, rewrite(stmt.rhs),
                          scalar=stmt.scalar or stmt.target in contracted)
                for stmt in step.body)
        new_steps.append(replace(step, body=body))

    new = replace(
            program,
            arrays=tuple(d for d in program.arrays
                         if d.name not in contracted),
            steps=tuple(new_steps))
    if log is not None:
        log.note(f"contract_arrays: {len(contracted)} temporaries became "
                 f"registers: {', '.join(sorted(contracted))}")
    validate(new)
    return new

# }}}


# {{{ parallel tagging

def _var_is_parallel(nest: LoopNest, pos: int) -> bool:
    var = nest.loop_vars[pos]
    written_here = {s.target for s in nest.body if not s.scalar}
    scalars = _scalar_targets(nest)
    for stmt in nest.body:
        for load in ex.loads_in(stmt.rhs):
            if load.ref in scalars or load.ref not in written_here:
                continue
            if load.indices[pos] != ex.Var(var.name):
                return False
            for other, idx_e in enumerate(load.indices):
                if other != pos and var.name in ex.free_variables(idx_e):
                    return False
    return True


def tag_parallel(program: IrProgram,
                 log: PassLog | None = None) -> IrProgram:
    """Mark loop variables without cross-iteration dependencies.

    A variable is parallel when every same-nest read of a same-nest
    write uses the variable's own index at its position and nowhere
    else.  Reduction loops inside statements stay sequential.
    """
    new_steps: list[LoopNest | CallStep] = []
    marked = 0
    for step in program.steps:
        if isinstance(step, CallStep):
            new_steps.append(step)
            continue
        loop_vars = tuple(
                replace(v, parallel=_var_is_parallel(step, pos))
                for pos, v in enumerate(step.loop_vars))
        marked += sum(1 for v in loop_vars if v.parallel)
        new_steps.append(replace(step, loop_vars=loop_vars))
    new = replace(program, steps=tuple(new_steps))
    if log is not None:
        log.note(f"tag_parallel: {marked} parallel loop variables")
    return new

# }}}


def apply_ir_passes(program: IrProgram, config: PassConfig | None = None,
                    log: PassLog | None = None) -> IrProgram:
    """Run the loop-level passes in their fixed order, callees included."""
    config = config or PassConfig()

    new_steps = []
    changed = False
    for step in program.steps:
        if isinstance(step, CallStep):
            callee = apply_ir_passes(step.callee, config, log)
            if callee is not step.callee:
                step = replace(step, callee=callee)
                changed = True
        new_steps.append(step)
    if changed:
        program = replace(program, steps=tuple(new_steps))

    if config.fuse_loops:
        program = fuse_loops(program, log)
    if config.contract_arrays:
        program = contract_arrays(program, log)
    if config.tag_parallel:
        program = tag_parallel(program, log)
    validate(program)
    return program
