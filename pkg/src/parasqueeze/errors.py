"""Exception types raised by the package."""


class CalibrationError(RuntimeError):
    """No (Omega, kappa) pair reproduces the requested targets."""


class UndefinedPhaseError(ValueError):
    """The relative phase is undefined because the coherence vanishes."""


class DegeneratePhaseError(ValueError):
    """The half-domain orbital overlap is too small to define a phase."""


class OrthonormalityError(RuntimeError):
    """Orbital orthonormality drifted beyond the abort threshold."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or violates an invariant."""
