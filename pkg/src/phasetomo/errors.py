"""Exception types shared across the pipeline."""


class PhasetomoError(Exception):
    """Base class for all library errors."""


class OutOfDomainError(PhasetomoError, ValueError):
    """Query point outside a grid field without vacuum extension."""


class ConnectionFailure(PhasetomoError, RuntimeError):
    """Two-point geodesic solver did not converge within its budget."""


class AmplitudeFailure(PhasetomoError, RuntimeError):
    """Ray-tube Jacobian degenerate (caustic); spreading amplitude undefined."""


class DatasetError(PhasetomoError, RuntimeError):
    """A whole dataset stage failed (e.g. every pair unusable)."""


class InconsistentDataError(PhasetomoError, ValueError):
    """Spectrum contradicts its declared model (e.g. negative amplitude)."""


class InsufficientBandError(PhasetomoError, ValueError):
    """k-window too short to resolve the oscillation (too few zeros)."""


class UnreliableEstimateError(PhasetomoError, RuntimeError):
    """Zero-spacing fit residual above threshold; estimate rejected."""


class KernelFailure(PhasetomoError, RuntimeError):
    """Too many geodesics untraceable while assembling the ray kernel."""


class InversionFailure(PhasetomoError, RuntimeError):
    """Travel-time inversion diverged; iteration history attached."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
