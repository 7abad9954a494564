"""Exception hierarchy shared across the package."""


class CEDError(Exception):
    """Base class for all errors raised by cedkws."""


class InvalidInputError(CEDError, ValueError):
    pass


class OOVError(CEDError, KeyError):
    """A word is missing from the lexicon."""

    def __init__(self, word):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"out-of-vocabulary word: {self.word!r}"


class UnsupportedFormatError(CEDError):
    pass


class IncompatibleCheckpointError(CEDError):
    pass


class IncompatibleBundleError(CEDError):
    pass


class AlignmentInfeasibleError(CEDError):
    """Fewer audio frames than phonemes, so no monotone alignment exists."""


class CoverageError(CEDError):
    """Phonemes without a vector in the P2V database."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class GenerationFailedError(CEDError):
    pass


class ConsistencyError(CEDError):
    pass
