"""Exception hierarchy. Each class knows the exit code the CLI maps it to."""


class PruneDistillError(Exception):
    exit_code = 1


class ConfigError(PruneDistillError):
    exit_code = 1


class ArchitectureError(ConfigError):
    pass


class DataError(PruneDistillError):
    exit_code = 2


class MissingDataError(DataError):
    pass


class IdxMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RecordSizeError(DataError):
    pass


class NumericError(PruneDistillError):
    exit_code = 3


class EngineError(PruneDistillError):
    exit_code = 3


class CheckpointError(PruneDistillError):
    exit_code = 1


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


# verify command only; not raised
VERIFY_FAILED_EXIT_CODE = 4
