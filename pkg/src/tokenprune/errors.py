"""Exception hierarchy shared by the engine, criteria and harness."""


class PruneError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PruneError, ValueError):
    """Invalid model, criterion, schedule or experiment configuration."""


class BudgetError(PruneError, ValueError):
    """A stage asked to keep more visual tokens than are alive."""


class InputError(PruneError, ValueError):
    """Malformed or mutually inconsistent inputs."""


class StateError(PruneError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class UndefinedValueError(PruneError, ValueError):
    """A metric has no defined value for the given input."""
