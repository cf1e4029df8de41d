"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or hit a non-PD matrix."""


class TrainingError(NumericalError):
    """Score-model training diverged."""


class SamplerError(NumericalError):
    """Sampler state became non-finite."""


class CapabilityError(TypeError):
    """A score model lacks an operation the caller asked for (e.g. VJP)."""


class FormatError(ValueError):
    """Malformed checkpoint, CSV, or config content."""
