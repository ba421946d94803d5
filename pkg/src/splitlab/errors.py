"""Shared exception types."""


class SplitLabError(Exception):
    pass


class ConfigurationError(SplitLabError):
    """Bad shapes, bad ids, out-of-range knobs."""


class DegenerateInputError(SplitLabError):
    """Input is valid in type but has no meaningful answer (zero vector, empty set)."""


class InvalidStateError(SplitLabError):
    """A stateful object is in a state its operation cannot serve."""


class TrainingDivergenceError(SplitLabError):
    """Non-finite gradients or losses during an optimizer step."""


class DegenerateGraphError(SplitLabError):
    """Graph too small or node isolated for the requested operation."""


class DisconnectedGraphError(DegenerateGraphError):
    """Spectral-gap-dependent quantity requested on a disconnected graph."""


class RefinementAborted(SplitLabError):
    """Server refinement loss exploded past its divergence guard."""
