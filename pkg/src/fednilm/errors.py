"""Exception hierarchy.  Each family maps onto one CLI exit code."""


class FedNilmError(Exception):
    exit_code = 1


class ConfigError(FedNilmError, ValueError):
    exit_code = 2


class ArchitectureError(ConfigError):
    pass


class DataError(FedNilmError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DegenerateStatsError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DimensionError(FedNilmError, ValueError):
    exit_code = 3


class SpecHashMismatch(FedNilmError, ValueError):
    exit_code = 3


class ProtocolError(FedNilmError):
    exit_code = 4


class TrainingAborted(FedNilmError):
    exit_code = 5


class ZeroDenominatorError(FedNilmError, ZeroDivisionError):
    exit_code = 3
