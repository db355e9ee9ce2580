"""Exception types shared across the simulator."""


class SimulatorError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(SimulatorError):
    """Invalid or inconsistent configuration values."""


class ContractError(SimulatorError):
    """A call violated an operation's preconditions (shape or provenance mismatch)."""


class NumericsError(SimulatorError):
    """Non-finite values appeared where finite activations are required."""


class NumericalDivergenceError(NumericsError):
    """The sampling trajectory left the finite range; the run was aborted."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class OracleScaleError(SimulatorError):
    """The reference oracle refused an instance above its intended size."""
