"""Exception hierarchy.

Each top-level family carries the process exit code the CLI uses for it.
"""


class VivoError(Exception):
    exit_code = 1


class ConfigError(VivoError):
    exit_code = 2


class DataError(VivoError):
    exit_code = 3

    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class DivergedLoss(VivoError):
    exit_code = 4


class VivoIOError(VivoError):
    exit_code = 5


# tokenizer
class UnknownCharacter(DataError):
    pass


# batch builder
class EmptyTags(DataError):
    pass


class EmptyCaption(DataError):
    pass


class OverLength(DataError):
    pass


class MalformedPrefix(DataError):
    pass


# encoder
class ShapeMismatch(VivoError):
    pass


class NonFiniteInput(VivoError):
    pass


class MissingForwardCache(VivoError):
    pass


class CorruptCheckpoint(VivoIOError):
    pass


# matching
class NonSquare(ValueError, VivoError):
    pass


class NonFinite(ValueError, VivoError):
    pass


class EmptyPlan(VivoError):
    pass


class BlockLengthMismatch(VivoError):
    pass


# decoding
class EmptyConstraint(ValueError, VivoError):
    pass


class NoHypothesis(VivoError):
    pass
