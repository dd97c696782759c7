"""Exception types shared across the package."""


class RnnFilterError(Exception):
    """Base class for all package errors."""


class InvalidModelError(RnnFilterError):
    """A system model, or an input meant for one, is malformed."""


class IntegrationDivergedError(RnnFilterError):
    """A numerical integration step produced non-finite values."""


class SingularInnovationError(RnnFilterError):
    """The filter innovation covariance is not positive definite."""


class DivergedTrainingError(RnnFilterError):
    """Training hit a non-finite loss or gradient.

    Carries the partial training record (may be None if divergence happened
    before the first epoch completed).
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class DatasetFormatError(RnnFilterError):
    """A persisted dataset or checkpoint fails validation on load."""
