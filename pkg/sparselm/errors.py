class SparseLmError(Exception):
    """Base class for library errors."""


class ShapeMismatchError(SparseLmError, ValueError):
    """Operand shapes disagree, or a mask does not fit its plan."""


class InfeasibleSparsityError(SparseLmError, ValueError):
    """A sparsity solver cannot reach the requested budget or density."""


class CorpusError(SparseLmError):
    """Missing, empty, too short or malformed data; out-of-range ids."""


class NonFiniteGradientError(SparseLmError, FloatingPointError):
    """An optimizer step was aborted because a gradient is NaN or infinite."""


class DivergenceError(SparseLmError):
    """Training produced a non-finite loss."""
