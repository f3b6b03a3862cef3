"""Exception hierarchy.

Three top-level categories map onto CLI exit codes: configuration problems
(2), bad input data (3) and pipeline-level failures (4).
"""


class TriSelectError(Exception):
    exit_code = 1


class ConfigError(TriSelectError):
    exit_code = 2


class InputError(TriSelectError):
    exit_code = 3


class PipelineError(TriSelectError):
    exit_code = 4


# -- parsing ---------------------------------------------------------------

class MalformedField(InputError):
    def __init__(self, key, value, reason=""):
        self.key = key
        self.value = value
        msg = f"malformed value for {key!r}: {value!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class MissingField(InputError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"missing required field {key!r}")


class ConstraintViolation(InputError):
    pass


class MalformedRecord(InputError):
    def __init__(self, line_no, reason):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class DuplicatePid(InputError):
    def __init__(self, pid):
        self.pid = pid
        super().__init__(f"duplicate pid {pid}")


# -- numerics --------------------------------------------------------------

class DegeneratePair(ValueError, TriSelectError):
    """Bearing requested between coincident points."""


class TooFewRecords(ValueError, PipelineError):
    pass


class DegenerateAngle(ValueError, PipelineError):
    def __init__(self, pid):
        self.pid = pid
        super().__init__(f"pid {pid}: no heading and location coincides with target")


class InvalidSigma(ValueError, ConfigError):
    pass


class InvalidK(ValueError, ConfigError):
    pass


class EmptyClusterUnrecoverable(PipelineError):
    pass


class AsymmetricInput(ValueError, InputError):
    pass


# -- images ----------------------------------------------------------------

class ImageTooSmall(ValueError, InputError):
    pass


class NoFeatures(ValueError, InputError):
    def __init__(self, pid):
        self.pid = pid
        super().__init__(f"pid {pid}: descriptor set is empty")


class ImageDecodeError(InputError):
    def __init__(self, pid, path, reason):
        self.pid = pid
        self.path = path
        super().__init__(f"pid {pid}: cannot decode {path}: {reason}")


# -- synthetic data / reporting -------------------------------------------

class ConfigInvalid(ValueError, ConfigError):
    pass


class PoseOutOfRange(ValueError, ConfigError):
    pass


class MissingStage(PipelineError):
    pass


class EmptyStageInput(PipelineError):
    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"EmptyStageInput: stage {stage} received no images"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TaskFileInvalid(ConfigError):
    """The task file could not be read or parsed."""
