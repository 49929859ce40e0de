"""Exception hierarchy shared by every stage.

Each error carries an ``exit_code`` that the CLI maps to its process status:
1 usage/config problems, 2 data problems, 3 numeric failures.
"""


class Sketch2FaceError(Exception):
    exit_code = 2


class ConfigError(Sketch2FaceError):
    exit_code = 1


class CheckpointError(Sketch2FaceError):
    code = "checkpoint"


class MissingCheckpointError(CheckpointError):
    code = "missing_file"


class CheckpointVersionError(CheckpointError):
    code = "version_mismatch"


class CorruptCheckpointError(CheckpointError):
    code = "corrupt_weights"


class ShapeError(Sketch2FaceError, ValueError):
    pass


class NonFiniteError(Sketch2FaceError, ValueError):
    exit_code = 3


class RegistryError(Sketch2FaceError):
    pass


class WeightsMissingError(RegistryError):
    pass


class ExtractorMismatchError(Sketch2FaceError):
    pass


class DatasetError(Sketch2FaceError):
    pass


class TrainingDivergedError(Sketch2FaceError):
    exit_code = 3


class OracleUnavailableError(Sketch2FaceError):
    pass
