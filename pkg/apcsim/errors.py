"""
Error types raised by the simulator.
Every error derives from ApcsimError so the command line can map it to an exit code.
"""


class ApcsimError(Exception):
    """Base class for all simulator errors"""

    exit_code = 1


class DimensionError(ApcsimError, ValueError):
    """Operand shapes do not fit together"""


class ContractError(ApcsimError, ValueError):
    """A precondition of an operation was violated"""


class DomainError(ApcsimError, ValueError):
    """A numeric argument lies outside the domain of an operation"""


class CalibrationError(ApcsimError):
    """Range calibration could not be performed"""


class ConfigError(ApcsimError):
    """The experiment configuration is invalid"""

    exit_code = 3


class DataError(ApcsimError):
    """A dataset or artifact file is missing or malformed"""

    exit_code = 4


class LoadError(DataError):
    """A model manifest could not be loaded"""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ChecksumError(LoadError):
    """The weight blob does not match the manifest checksum"""


class TrainingError(ApcsimError):
    """A reference model failed to reach its minimum accuracy"""


class DivergenceError(ApcsimError):
    """Energy training produced a non-finite loss"""

    def __init__(self, message, last_good=None, diagnostics=None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostics = diagnostics or {}


class InfeasibleError(ApcsimError):
    """No energy in the search bracket reaches the accuracy floor"""

    exit_code = 2
