"""Exception hierarchy shared by every kronlab module."""


class KronlabError(Exception):
    """Base class for all library errors."""


class ExtentMismatch(KronlabError, ValueError):
    """Array extents do not agree with what an operation requires."""


class InvalidPermutation(KronlabError, ValueError):
    pass


class RankError(KronlabError, ValueError):
    """An array has the wrong number of dimensions."""


class ConvergenceFailure(KronlabError, ArithmeticError):
    pass


class ConstraintViolation(KronlabError, ValueError):
    """A layer configuration breaks a structural constraint."""


class StaleCache(KronlabError, ValueError):
    """A backward pass was given a cache that does not match the layer."""


class LabelOutOfRange(KronlabError, ValueError):
    pass


class NonFinite(KronlabError, ArithmeticError):
    pass


# file formats

class BadMagic(KronlabError, ValueError):
    pass


class TruncatedFile(KronlabError, ValueError):
    pass


class VersionUnsupported(KronlabError, ValueError):
    pass


class UnsupportedFormat(KronlabError, ValueError):
    pass


class MalformedHeader(KronlabError, ValueError):
    pass


class ConfigSyntaxError(KronlabError, ValueError):
    """Raised by the config parser; carries the offending line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
