"""
Exception types raised across the r3_captioner package.

Every error derives from R3Error so the CLI can report any of them
as a one-line diagnostic. Most also derive from ValueError, which
keeps plain ``except ValueError`` handlers working.
"""


class R3Error(Exception):
    """
    Base class for all errors raised by r3_captioner.
    """


class DimensionError(R3Error, ValueError):
    """
    Raised when tensor shapes do not agree for an operation.
    """


class NumericError(R3Error, ValueError):
    """
    Raised on NaN or otherwise non-finite values.
    """


class ContractError(R3Error, ValueError):
    """
    Raised when a caller breaks an operation's pre-condition.
    """


class ConfigError(R3Error, ValueError):
    """
    Raised for invalid hyperparameters passed outside of a
    validated config model.
    """


class RangeError(R3Error, IndexError, ValueError):
    """
    Raised for indices, lengths or coordinates outside their
    permitted range.
    """


class VocabularyError(R3Error, KeyError, ValueError):
    """
    Raised when a word is not part of the closed vocabulary.
    """

    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"Out-of-vocabulary word: {self.word!r}"


class FormatError(R3Error, ValueError):
    """
    Raised when an on-disk container has a bad magic, an
    unsupported version or is truncated.
    """


class RecordValidationError(R3Error, ValueError):
    """
    Raised when a record read from a feature file breaks a
    geometry or alignment invariant.

    Args:
        index: Position of the offending record in the file
        reason: What was wrong with it
    """

    def __init__(self, index: int, reason: str):
        super().__init__(f"Record {index}: {reason}")
        self.index = index
        self.reason = reason
