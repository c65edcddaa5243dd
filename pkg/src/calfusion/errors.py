"""Exception hierarchy.

Every error raised on purpose by the package derives from ``CalfusionError``
so callers (and the CLI) can separate modelling failures from bugs.
"""


class CalfusionError(Exception):
    """Base class for all package errors."""

    module = "calfusion"


# data_model
class DataError(CalfusionError):
    module = "data_model"


class SchemaError(DataError):
    pass


class PatternError(DataError):
    """A row violates the two-sample missingness pattern."""


class ParseError(DataError):
    pass


# model_zoo
class ModelError(CalfusionError):
    module = "model_zoo"


class SpecError(ModelError):
    pass


class SeparationError(ModelError):
    pass


class SingularError(ModelError):
    pass


class RankError(ModelError):
    pass


# el_calibration
class CalibrationError(CalfusionError):
    module = "el_calibration"


class DegenerateConstraintError(CalibrationError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class NoInteriorSolutionError(CalibrationError):
    pass


class SingularHessianError(CalibrationError):
    pass


class NonpositiveSlackError(CalibrationError):
    pass


# estimators
class EstimationError(CalfusionError):
    module = "estimators"


class DimensionError(EstimationError):
    pass


class NonconvergenceError(EstimationError):
    pass


class SingularJacobianError(EstimationError):
    pass


class ExtremeWeightWarning(UserWarning):
    """Inverse propensity weights above the reporting threshold."""


# inference
class InferenceError(CalfusionError):
    module = "inference"


class SingularMatrixError(InferenceError):
    pass


# sim_harness / cli_app
class ConfigError(CalfusionError):
    module = "cli_app"
