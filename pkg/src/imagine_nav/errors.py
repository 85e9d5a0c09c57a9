"""Exception hierarchy shared across the package."""


class NavError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NavError, ValueError):
    pass


class ContractError(NavError, ValueError):
    """A caller violated an operation's preconditions (shapes, ranges)."""


class LookupFailure(NavError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnreachableError(NavError):
    pass


class GenerationError(NavError):
    pass


class NoGoalError(NavError):
    """The instruction has no unmet entity left; callers treat this as a stop signal."""
