"""Lazy array computation.

Arrays are built as dataflow graphs, transformed by graph-level and
loop-level rewrites, lowered to a scalar loop IR, and executed by the
bundled interpreter; kernel source in OpenCL style is emitted as a
presentation artifact of the same schedule.
"""

from .adfg import (
    Array, AxisTag, Call, CallResult, Concatenate, Data, DType, Einsum,
    FunctionDefinition, Graph, IndexLambda, Indexing, Node, Placeholder,
    Receive, Reshape, Send, SendWrapper, Slice, Stack,
)
from .errors import LazeError
from .frontend import ArrayContext, eager_eval, freeze

__all__ = [
    "Array", "ArrayContext", "AxisTag", "Call", "CallResult", "Concatenate",
    "Data", "DType", "Einsum", "FunctionDefinition", "Graph", "IndexLambda",
    "Indexing", "LazeError", "Node", "Placeholder", "Receive", "Reshape",
    "Send", "SendWrapper", "Slice", "Stack", "eager_eval", "freeze",
]
