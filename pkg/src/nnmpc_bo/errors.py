class ContractViolation(ValueError):
    """Argument shapes or values break an operation's preconditions."""


class ModelFitError(RuntimeError):
    """Surrogate fitting failed, e.g. Cholesky failed at the largest jitter."""


class ConfigError(ValueError):
    pass
