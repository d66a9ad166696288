"""Exception types shared across the package."""


class DatasetError(Exception):
    """A dataset directory is missing files or fails validation."""


class QidConflictError(DatasetError):
    """Two entities were assigned the same canonical id."""


class NotFoundError(Exception):
    """A requested page or resource does not exist."""


class TransientError(Exception):
    """A retryable failure (timeouts, 5xx, connection resets)."""


class PermanentError(Exception):
    """A non-retryable failure (4xx responses, bad payloads)."""


class EmptyInputError(Exception):
    """An operation received no usable input."""


class MissingModalityError(Exception):
    """A text variant or feature table required by the run is absent."""


class PipelineStageError(Exception):
    """A pipeline stage failed; dependent stages were not run."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
