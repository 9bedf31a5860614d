"""Exception hierarchy shared across the toolkit."""


class GateFeatError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(GateFeatError, ValueError):
    """Invalid configuration, argument or data invariant."""


class SchemaMismatchError(GateFeatError):
    """A stored file was written with a different schema version."""


class CorruptFileError(GateFeatError):
    """A stored file cannot be parsed."""


class HookCaptureError(GateFeatError):
    """Captured layer count does not match the checkpoint family."""


class ResourceMissingError(GateFeatError):
    """A technique resource (LoRA file, ControlNet, captioner) is unavailable."""


class CaptionerError(GateFeatError):
    """The captioning backend failed to produce a caption."""


class DivergenceError(GateFeatError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, batch_id: int | None = None):
        super().__init__(message)
        self.batch_id = batch_id
