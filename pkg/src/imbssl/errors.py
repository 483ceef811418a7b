"""Exception types shared across the package."""


class ImbsslError(Exception):
    """Base class for all errors raised by this package."""


class MalformedCorpusError(ImbsslError):
    pass


class CorruptRecordError(ImbsslError):
    pass


class InvalidSpecError(ImbsslError, ValueError):
    pass


class InvalidConfigError(ImbsslError, ValueError):
    pass


class DegenerateInputError(ImbsslError, ValueError):
    pass


class CheckpointError(ImbsslError):
    pass


class PipelineError(ImbsslError):
    pass


class MissingArtifactsError(ImbsslError):
    pass


class StageError(ImbsslError):
    """Wraps a failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class RunLockedError(PipelineError):
    """Another process holds the run directory."""
