"""
Exception hierarchy shared by every package.

Each family carries the exit code the CLI returns for it:
- ValidationError -> 2 (bad input, bad config, violated precondition)
- AlgorithmError  -> 3 (search or training failure)
- StorageError    -> 4 (weight files, checkpoints, block reads)
"""


class PuddingError(Exception):
    """Base class for all errors raised by this project."""

    exit_code: int = 1


class ValidationError(PuddingError, ValueError):
    """Input or configuration violates a documented constraint."""

    exit_code = 2


class AlgorithmError(PuddingError, RuntimeError):
    """Search or training could not produce a result."""

    exit_code = 3


class StorageError(PuddingError, OSError):
    """Reading or writing a persisted artefact failed."""

    exit_code = 4


# Validation family


class InvalidOmissionError(ValidationError):
    pass


class EmptyModelError(ValidationError):
    pass


class VocabularyError(ValidationError):
    pass


class InsufficientLengthError(ValidationError):
    pass


class MissingContrastError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class InvalidKError(ValidationError):
    pass


class PoolBindingError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InvalidBandwidthError(ValidationError):
    pass


class EmptyWorkloadError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# Algorithm family


class CombinatorialBlowupError(AlgorithmError):
    pass


class DivergenceError(AlgorithmError):
    """Non-finite loss or gradient during router training."""

    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"Training diverged at step {step}: {detail}")
        self.step = step


class SampleEvaluationError(AlgorithmError):
    """Loss evaluation failed for one sample of a dataset."""

    def __init__(self, index: int, cause: Exception) -> None:
        super().__init__(f"Sample {index}: {cause}")
        self.index = index
        self.exit_code = getattr(cause, "exit_code", AlgorithmError.exit_code)


# Storage family


class WeightFormatError(StorageError):
    pass


class BlockLoadError(StorageError):
    """A transformer block could not be read from the backing file."""

    def __init__(self, block_index: int, detail: str) -> None:
        super().__init__(f"Failed to load block {block_index}: {detail}")
        self.block_index = block_index
