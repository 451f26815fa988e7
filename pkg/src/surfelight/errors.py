"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, normalization, ...)."""


class InputDataError(ValueError):
    """Input data (images, manifests, environment maps) is malformed."""


class LossUndefinedError(ValueError):
    """A loss or metric has no valid support, e.g. an empty mask."""


class StaleFragmentsError(ContractViolation):
    """Backward was called with fragments from a different scene state."""


class UsageError(ValueError):
    """A command was invoked with missing or conflicting inputs."""
