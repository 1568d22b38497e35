"""Exception hierarchy. CLI exit codes are attached to each class."""


class PTFPError(Exception):
    exit_code = 1


class UsageError(PTFPError):
    exit_code = 2


class ConfigError(PTFPError):
    exit_code = 3


class ShapeError(PTFPError, ValueError):
    exit_code = 3


class EncodingError(PTFPError, ValueError):
    exit_code = 3


class AlignmentError(PTFPError, ValueError):
    exit_code = 3


class CalibrationError(PTFPError, ValueError):
    exit_code = 3


class CalibrationRangeError(CalibrationError):
    pass


class UnreachableWeightError(CalibrationError):
    def __init__(self, target, lo, hi):
        super().__init__(f"weight {target!r} unreachable; achievable range is [{lo:.6g}, {hi:.6g}]")
        self.target = target
        self.achievable = (lo, hi)


class SynchronizationError(PTFPError):
    exit_code = 3


class CapacityError(PTFPError):
    exit_code = 4


class NumericError(PTFPError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    def __init__(self, msg, last_stable_epoch=None):
        super().__init__(msg)
        self.last_stable_epoch = last_stable_epoch
