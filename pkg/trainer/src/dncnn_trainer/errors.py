"""Trainer exception types."""


class TrainerError(Exception):
    """Base class for everything this package raises deliberately."""


class CorpusError(TrainerError):
    """Image folder missing, empty, or unreadable."""


class FormatError(TrainerError):
    """Weight file does not parse as a .dnw container."""


class TrainingDiverged(TrainerError):
    """Loss went non-finite; carries the epoch it happened in."""

    def __init__(self, epoch: int, message: str):
        super().__init__(message)
        self.epoch = epoch
