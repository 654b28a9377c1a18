"""Exception hierarchy shared by every flexroi module.

Each exception carries the process exit code the CLI maps it to.
"""


class FlexError(Exception):
    exit_code = 2


class UsageError(FlexError):
    exit_code = 1


class ShapeError(FlexError, ValueError):
    pass


class ParameterError(FlexError, ValueError):
    pass


class ConfigurationError(FlexError, ValueError):
    pass


class GenerationError(FlexError, RuntimeError):
    pass


class PersistedStateError(FlexError, OSError):
    pass


class NumericInputError(FlexError, ArithmeticError):
    exit_code = 3


class NumericFailure(FlexError, ArithmeticError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, message, iteration=None, roi_id=None):
        super().__init__(message)
        self.iteration = iteration
        self.roi_id = roi_id


class DegenerateWeightsError(FlexError, ArithmeticError):
    exit_code = 3
