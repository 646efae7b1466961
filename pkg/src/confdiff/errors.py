"""Exception taxonomy shared by all engines.

The CLI maps these onto exit codes: validation -> 2, capacity -> 3,
non-convergence -> 4.
"""


class ConfdiffError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ConfdiffError):
    """Invalid input: bad parameter value, malformed config, unknown key."""


class CapacityError(ConfdiffError):
    """Requested size exceeds the configured memory/step budget."""


class ConvergenceError(ConfdiffError):
    """A numerical procedure failed to reach its stated tolerance."""


class DomainError(ConfdiffError):
    """A geometric query was made outside the confining domain."""
