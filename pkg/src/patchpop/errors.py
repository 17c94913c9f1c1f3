"""Exception hierarchy shared by the package."""


class PatchPopError(Exception):
    """Base class for all package errors."""


class ConfigError(PatchPopError, ValueError):
    """Malformed or incomplete configuration; the message names the key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class AssumptionError(PatchPopError, ValueError):
    """A model violates a structural assumption (sign of a, d, symmetry...)."""


class NumericalError(PatchPopError, ArithmeticError):
    """Iteration failed to converge; ``residual`` carries the last value."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class PositivityError(NumericalError):
    """Perron vector has a vanishing component (reducible migration graph)."""


class StabilityError(PatchPopError, ValueError):
    """Time step outside the explicit stability budget."""

    def __init__(self, message: str, dt_max: float):
        super().__init__(message)
        self.dt_max = dt_max


class BlowUpError(NumericalError):
    """Pressures left the admissible range during time stepping."""


class BracketError(PatchPopError, ValueError):
    """Root bracket does not straddle a sign change."""


class InfeasibleError(NumericalError):
    """Normalization cannot be met with nonnegative Dirac weights."""
