from .numerics.tensor import ContractViolation


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class SamplingError(ValueError):
    """A batch or episode cannot be drawn from the available data."""


__all__ = ["ConfigError", "ContractViolation", "SamplingError"]
