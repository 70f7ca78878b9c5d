"""End-to-end compilation: dataflow graph to executable loop program.

The stages run in a fixed order: graph passes (deduplication, constant
folding, tag propagation, call concatenation, materialization), then
lowering to the scalar-loop form, validation, loop-level passes
(fusion, contraction, parallel tagging), and kernel emission.  The
result executes through the interpreter; the emitted kernel text is
carried alongside for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adfg import Graph
from .backend import (
    KernelSource, ProfileRecord, StageTimer, emit_kernels, program_source,
    run_ir,
)
from .graph_passes import PassConfig, PassLog, apply_graph_passes
from .ir_passes import apply_ir_passes
from .scalar_ir import IrProgram, lower, program_text, validate


@dataclass
class CompiledProgram:
    """A graph compiled down to a runnable loop program."""

    graph: Graph
    transformed: Graph
    program: IrProgram
    kernels: tuple[KernelSource, ...]
    config: PassConfig
    log: PassLog
    timer: StageTimer
    profile: list[ProfileRecord] = field(default_factory=list)

    def execute(self, bindings: dict | None = None,
                ) -> dict[str, np.ndarray]:
        with self.timer.stage("execute"):
            return run_ir(self.program, bindings or {}, self.profile)

    @property
    def kernel_source(self) -> str:
        return "\n\n".join(k.text for k in self.kernels)

    @property
    def program_text(self) -> str:
        return program_text(self.program)


def compile_graph(graph: Graph, config: PassConfig | None = None,
                  log: PassLog | None = None,
                  timer: StageTimer | None = None) -> CompiledProgram:
    """Run the full pipeline on a single-process graph."""
    config = config or PassConfig()
    log = log if log is not None else PassLog()
    timer = timer or StageTimer()

    with timer.stage("graph_passes"):
        transformed = apply_graph_passes(graph, config, log)
    with timer.stage("lower"):
        program = lower(transformed, config, log)
    with timer.stage("validate"):
        validate(program)
    with timer.stage("ir_passes"):
        program = apply_ir_passes(program, config, log)
    with timer.stage("emit"):
        kernels = emit_kernels(program)

    return CompiledProgram(
            graph=graph, transformed=transformed, program=program,
            kernels=kernels, config=config, log=log, timer=timer)


__all__ = [
    "CompiledProgram", "compile_graph", "program_source",
]
