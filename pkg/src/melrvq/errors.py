"""Exception hierarchy shared by every module."""


class MelRvqError(Exception):
    """Base class for all package errors."""


class FormatError(MelRvqError, ValueError):
    """A file does not follow the expected binary layout."""


class UnsupportedCodecError(FormatError):
    """WAV payload uses an encoding we do not decode."""


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TooShortError(MelRvqError, ValueError):
    """Audio is shorter than one analysis window."""


class ShapeError(MelRvqError, ValueError):
    pass


class NormalizationUndefinedError(MelRvqError, ArithmeticError):
    """l2-normalization requested for the zero vector."""


class DomainError(MelRvqError, ValueError):
    pass


class InsufficientFramesError(MelRvqError, ValueError):
    pass


class FrozenQuantizerError(MelRvqError, RuntimeError):
    def __init__(self, msg="frozen quantizer"):
        super().__init__(msg)


class TrainingDivergenceError(MelRvqError, FloatingPointError):
    def __init__(self, step, what="gradient"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class NoMaskedFramesError(MelRvqError, ValueError):
    pass


class InsufficientNegativesError(MelRvqError, ValueError):
    pass
