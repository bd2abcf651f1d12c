"""Exception types shared across the querycat package."""


class QuerycatError(Exception):
    """Base class for all errors raised by this package."""


class MalformedRecord(QuerycatError):
    """A click-log line could not be parsed in strict mode."""

    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        self.reason = reason
        detail = f": {reason}" if reason else ""
        super().__init__(f"malformed record at line {line_no}{detail}")


class IoFailure(QuerycatError):
    """An underlying read or write failed."""


class InvalidSpec(QuerycatError):
    """A synthetic-log specification violates its preconditions."""


class InvalidArgument(QuerycatError):
    """An argument violates an operation's preconditions."""


class IndexOutOfRange(QuerycatError):
    """A token id points outside the embedding table."""


class ShapeMismatch(QuerycatError):
    """Tensor shapes are not congruent with the operation."""


class StateMissing(QuerycatError):
    """A backward pass was requested without a cached forward pass."""


class ConfigMismatch(QuerycatError):
    """Model and dataset disagree on sequence length or classes."""


class FormatVersionMismatch(QuerycatError):
    """A persisted file is not in the expected format or version."""


class VocabHashMismatch(QuerycatError):
    """A model was built against a different vocabulary than the one supplied."""


class EmptyQuery(QuerycatError):
    """The query normalizes to the empty string."""


class BindFailure(QuerycatError):
    """The service could not bind its address."""
