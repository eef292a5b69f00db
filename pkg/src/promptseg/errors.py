"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value (bad window bounds, unknown config key, ...)."""


class ShapeError(ValueError):
    """Array shape does not match what the operation requires."""


class PromptError(ValueError):
    """Invalid prompt (degenerate box, empty text, ...)."""


class ArchiveFormatError(ValueError):
    """Sample archive is missing a required key or is otherwise malformed."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class EmptySurfaceError(ValueError):
    """A surface-distance metric was asked to measure against an empty mask."""

    def __init__(self, message: str, side: str | None = None):
        super().__init__(message)
        self.side = side


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss."""

    def __init__(self, message: str, step: int, batch_ids: list[str]):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
