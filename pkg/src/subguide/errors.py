"""Exception hierarchy shared across the package."""


class SubguideError(Exception):
    """Base class for all package errors."""


class ContractViolation(SubguideError):
    """A caller broke a documented precondition (shape, range, dimension)."""


class DomainError(SubguideError):
    """Inputs were structurally valid but mathematically out of domain
    (division by zero, log of a non-positive, empty max, alpha_bar == 0)."""


class TrainingDiverged(SubguideError):
    """Training loss became non-finite."""


class GuidanceAborted(SubguideError):
    """A guidance energy became non-finite during sampling."""

    def __init__(self, step_index: int, t: int, message: str = ""):
        self.step_index = step_index
        self.t = t
        super().__init__(f"non-finite guidance energy at step {step_index} (t={t}) {message}".rstrip())


class FileFormatError(SubguideError):
    """Base for persistence failures; `code` distinguishes the cause."""

    code = "format"


class BadMagicError(FileFormatError):
    code = "bad_magic"


class VersionMismatchError(FileFormatError):
    code = "version_mismatch"


class HashMismatchError(FileFormatError):
    code = "hash_mismatch"


class TruncatedFileError(FileFormatError):
    code = "truncated"
