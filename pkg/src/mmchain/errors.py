"""Exception hierarchy shared by all modules.

The CLI maps these onto distinct process exit codes, so new error kinds
should subclass one of the three leaf categories below.
"""


class MmchainError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(MmchainError):
    """An operation was called outside its documented preconditions."""


class DomainError(ContractViolation):
    """A mathematical operation received a value outside its domain."""


class ConfigError(MmchainError):
    """Invalid, unknown, or inconsistent configuration input."""


class DataError(MmchainError):
    """Corrupt or infeasible dataset / checkpoint contents."""


class NumericError(MmchainError):
    """NaN/Inf reached a point where it must never propagate further."""
