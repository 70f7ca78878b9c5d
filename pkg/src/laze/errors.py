"""Exception types raised across the package.

Every error that user code is expected to catch derives from
:class:`LazeError`.  Errors carry enough structured payload (node names,
communication keys) that callers can act on them without parsing messages.
"""

from __future__ import annotations


class LazeError(Exception):
    """Base class for all errors raised by this package."""


# {{{ graph construction

class ShapeMismatch(LazeError):
    """Operand shapes are incompatible for the requested operation."""


class DTypeMismatch(LazeError):
    """Operand dtypes are incompatible for the requested operation."""


class BadSubscript(LazeError):
    """A malformed einsum subscript or array subscript."""

# }}}


# {{{ frontend

class UnboundPlaceholder(LazeError):
    """Evaluation reached a placeholder with no bound value."""


class CommunicationInSingleProcessGraph(LazeError):
    """A send or receive node appeared where only one rank exists."""


class TracingError(LazeError):
    """A traced function returned something other than lazy arrays."""


class SignatureUnsupported(LazeError):
    """A compiled-function argument is not an array or scalar."""


class BindingMismatch(LazeError):
    """A bound value disagrees with the declared shape or dtype."""

# }}}


# {{{ graph passes

class TagConflict(LazeError):
    """Axis tag propagation met two different values for one tag key."""

# }}}


# {{{ distributed partitioning and execution

class MismatchedCommunication(LazeError):
    """A send or receive has no counterpart on the peer rank.

    .. attribute:: keys

        Tuple of offending ``(source, dest, tag)`` triples.
    """

    def __init__(self, msg: str, keys: tuple[tuple[int, int, int], ...]) -> None:
        super().__init__(msg)
        self.keys = keys


class CircularCommunication(LazeError):
    """The communication graph contains a cycle."""


class InfeasiblePlacement(LazeError):
    """No execution slot satisfies a node's send and receive constraints."""


class DeadlockDetected(LazeError):
    """Distributed execution cannot make progress.

    .. attribute:: missing

        Tuple of ``(source, dest, tag)`` triples that were awaited but
        never delivered.
    """

    def __init__(self, msg: str, missing: tuple[tuple[int, int, int], ...]) -> None:
        super().__init__(msg)
        self.missing = missing

# }}}


# {{{ lowering and execution

class UnsupportedComposition(LazeError):
    """A node composition has no scalar-expression lowering.

    Raised for gather chains deeper than one indirection level and for
    reduction nodes that would have to be inlined into a consumer.
    """


class OutOfBoundsIndex(LazeError):
    """A computed index fell outside the extent of the accessed array."""


class IrValidationError(LazeError):
    """A generated program violates a structural IR invariant."""

# }}}
