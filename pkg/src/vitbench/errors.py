"""Exception taxonomy shared across the package.

Every error a caller is expected to branch on has its own class; generic
ValueError/OSError only escape for genuinely unexpected states.
"""


class VitbenchError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VitbenchError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(VitbenchError):
    """A non-finite value (NaN/Inf) was produced or supplied."""


class ContractError(VitbenchError):
    """An argument violates a documented precondition."""


class ConfigError(VitbenchError):
    """Experiment configuration is malformed.

    ``field_path`` names the offending key, dotted from the config root.
    """

    def __init__(self, message, field_path=None):
        super().__init__(message if field_path is None else f"{field_path}: {message}")
        self.field_path = field_path


class DatasetError(VitbenchError):
    """Dataset tree or manifest construction failed."""


class EmptyDatasetError(DatasetError):
    """No usable samples were found under the dataset root."""


class ClassMapError(DatasetError):
    """A class directory has no entry in the configured class map."""


class DecodeError(VitbenchError):
    """An image file could not be decoded."""


class ImageFormatError(VitbenchError):
    """An image decoded to an unsupported mode or bit depth."""


class StratificationError(VitbenchError):
    """Fold construction is infeasible for the given manifest."""


class CheckpointError(VitbenchError):
    """Base for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointConfigError(CheckpointError):
    """Checkpoint was written for a different model configuration."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends before all parameters were read."""


class InvalidCountsError(VitbenchError):
    """Class counts contain a zero or negative entry."""


class InsufficientDataError(VitbenchError):
    """Too few values for the requested statistic."""
