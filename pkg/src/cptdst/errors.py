class CptError(Exception):
    """Base class for errors raised by cptdst."""


class ContractError(CptError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(CptError, FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""


class CorpusError(CptError, ValueError):
    """An ingested corpus file does not match the documented schema."""
