class DfmlError(Exception):
    """Base class for every error raised by the meta-learning services"""

    pass


class ConfigurationError(DfmlError):
    """Raised when a configuration cannot describe a valid run"""

    pass


class InputError(DfmlError):
    """Raised when an operation receives data of the wrong shape, range or provenance"""

    pass


class WhiteboxPermissionError(DfmlError):
    """Raised when gradient access is requested from a pool built without whitebox mode"""

    pass


class EstimationError(DfmlError):
    """Raised when a black-box loss evaluation returns a non-finite value"""

    def __init__(self, message: str, direction_index: int | None = None):
        super().__init__(message)
        # None means the unperturbed base point
        self.direction_index = direction_index


class UpdateRejectedError(DfmlError):
    """Raised when an optimizer step would apply non-finite gradients"""

    pass


class RecoveryError(DfmlError):
    """Raised when an API query fails in the middle of a recovery loop"""

    def __init__(self, message: str, queries_used: int = 0):
        super().__init__(message)
        self.queries_used = queries_used


class SamplingError(DfmlError):
    """Raised when a bank or data source cannot supply the requested episode"""

    pass


class EvaluationPurityError(DfmlError):
    """Raised when a meta-test class shows up in a training pathway"""

    pass


class TrainingAbortedError(DfmlError):
    """Raised when the number of failed training slots crosses the fatal threshold"""

    pass
