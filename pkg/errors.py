# errors.py
class SpceError(Exception):
    """Base class for toolkit errors."""


class SchemaError(SpceError):
    pass


class DataParseError(SpceError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class SeparationError(SpceError):
    """Responses are perfectly separated; the MLE does not exist."""

    def __init__(self, message: str, direction=None):
        super().__init__(message)
        self.direction = direction


class RankDeficiencyError(SpceError):
    pass


class ConvergenceError(SpceError):
    pass


class EmptyStratumError(SpceError):
    pass


class NoEventsError(SpceError):
    pass


class NonFiniteLikelihoodError(SpceError):
    def __init__(self, message: str, draw: int):
        super().__init__(f"draw {draw}: {message}")
        self.draw = draw


class EmMonotonicityError(SpceError):
    """Observed-data log-likelihood decreased during EM."""


class ZetaOutOfRangeError(SpceError):
    def __init__(self, zeta: float, bound: float):
        super().__init__(f"zeta={zeta} is outside [0, {bound:.6f})")
        self.zeta = zeta
        self.bound = bound


class ModelFitError(SpceError):
    """A nuisance model failed; carries which model."""

    def __init__(self, model: str, cause: Exception):
        super().__init__(f"{model}: {cause}")
        self.model = model
        self.cause = cause


class ReportInputError(SpceError):
    pass
