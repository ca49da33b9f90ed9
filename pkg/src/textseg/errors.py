"""Exception types. DataError maps to CLI exit code 2, NumericError to 3."""


class TextSegError(Exception):
    pass


class DataError(TextSegError, ValueError):
    pass


class NumericError(TextSegError, ArithmeticError):
    pass


# corpus
class ParseError(DataError):
    pass


class MalformedSeparator(ParseError):
    pass


class LevelJump(ParseError):
    pass


class InsufficientPool(DataError):
    pass


class EmptyCorpus(DataError):
    pass


# embeddings
class BadHeader(DataError):
    pass


class DimensionMismatch(DataError):
    def __init__(self, line, expected=None, got=None):
        self.line = line
        msg = f"line {line}: expected {expected} components, got {got}"
        super().__init__(msg)


class NonFiniteValue(DataError):
    def __init__(self, line):
        self.line = line
        super().__init__(f"line {line}: non-finite vector component")


class DuplicateToken(DataError):
    def __init__(self, token):
        self.token = token
        super().__init__(f"duplicate token {token!r}")


# nn / model
class ShapeMismatch(DataError):
    pass


class CheckpointError(DataError):
    pass


class DocumentTooShort(DataError):
    pass


class NonFiniteActivation(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    """Raised mid-training; carries the last parameters that produced a finite loss."""

    def __init__(self, msg, params=None, history=None):
        super().__init__(msg)
        self.params = params
        self.history = history


# train / infer / metrics
class LengthMismatch(DataError):
    pass


class EmptyDev(DataError):
    pass


class WindowTooLarge(DataError):
    pass
