"""Error hierarchy shared by the numerical services and the CLI."""


class LabError(Exception):
    """Base class for every error raised by the lab."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class NonPositiveMetric(LabError):
    pass


class UnsupportedDimension(LabError):
    pass


class EvaluationAtZeroSection(LabError):
    pass


class StepUnstable(LabError):
    pass


class OdeTolerance(LabError):
    pass


class CutoffTooSmall(LabError):
    pass


class ProbeOutOfRange(LabError):
    pass


class TruncationDepthExceeded(LabError):
    pass


class NotHolonomyInvariant(LabError):
    pass


class NonHermitianConnection(LabError):
    pass


class FitIllConditioned(LabError):
    pass


class NonHermitianBlock(LabError):
    pass


class CutoffMismatch(LabError):
    pass


class ConfigInvalid(LabError):
    """Raised while loading or validating an experiment config (exit code 2)."""


class AssertionFailed(LabError):
    """A scenario invariant did not hold (exit code 1)."""

    def __init__(self, invariant: str, detail: str = ""):
        message = f"invariant '{invariant}' failed"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.invariant = invariant
