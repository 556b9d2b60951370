"""Exception types shared across the package."""


class LfslError(Exception):
    """Base class for all package errors."""


class LoadError(LfslError):
    """A required input file is missing or unreadable."""


class IntegrityError(LfslError):
    """Cross-references between records are inconsistent."""


class CapacityError(LfslError):
    """Not enough instances to satisfy a selection or rebalance request."""


class ContractError(LfslError):
    """An operation was called with arguments violating its contract."""


class ConfigError(LfslError):
    """Invalid configuration (architecture, training setting, CLI input)."""
