"""Exception hierarchy shared by every module."""


class CSEError(Exception):
    """Base class for all errors raised by the engine."""

    kind = "error"


class RejectedInputError(CSEError, ValueError):
    """An array argument has the wrong shape, size or value range."""

    kind = "rejected_input"


class ConfigurationError(CSEError):
    kind = "configuration"


class DegenerateInputError(CSEError, ValueError):
    """A zero-norm vector reached a cosine computation."""

    kind = "degenerate_input"


class GenerationError(CSEError):
    """Defect synthesis could not produce a mask inside the coverage bounds."""

    kind = "generation"


class TrainingError(CSEError):
    kind = "training"


class EvaluationError(CSEError):
    kind = "evaluation"


class PersistenceError(CSEError):
    kind = "persistence"


class CorruptFileError(PersistenceError):
    kind = "corrupt_file"


class VersionError(PersistenceError):
    kind = "version"
