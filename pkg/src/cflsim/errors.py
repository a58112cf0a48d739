"""Error taxonomy shared by all simulator modules."""


class ConfigurationError(ValueError):
    """A user-supplied setting is out of range or inconsistent."""


class ContractError(ValueError):
    """A caller violated an internal API precondition."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class SingleClusterError(ValueError):
    """Silhouette is undefined for a single-cluster labeling."""
