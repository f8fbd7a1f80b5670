"""Exception hierarchy shared across the package.

Every error raised by this package derives from CicdError so callers can
catch the whole family at once. Protocol-level errors carry enough context
(byte offset, session, step) to be reported over the wire.
"""


class CicdError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CicdError):
    """Two vectors that must share a length do not."""


class EmptySupport(CicdError):
    """An operation needs at least one unmasked entry and found none."""


class ZeroNormError(CicdError):
    """Cosine similarity requested for a zero-norm vector."""


class DegenerateDivergence(CicdError):
    """Dynamic alpha requested for a zero divergence."""


class DuplicateId(CicdError):
    """An id occurred twice where ids must be unique."""


class InsufficientPool(CicdError):
    """A selection pool has too few candidates."""


class NotFound(CicdError):
    """Lookup of an unknown id."""


class ConfigError(CicdError):
    """Inconsistent or out-of-range configuration."""


class EncodingError(CicdError):
    """A wire message cannot be serialized (e.g. non-finite logits)."""


class ParseError(CicdError):
    """A wire line is not a valid message frame.

    ``offset`` is the byte offset within the line at which parsing failed,
    when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class UnknownType(ParseError):
    """A wire message has an unrecognized type."""


class VersionError(ParseError):
    """A wire message carries an unsupported protocol version."""


class SessionError(CicdError):
    """A backend session failed; ``step`` is the decoding step, if known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SessionMismatch(SessionError):
    """The two sessions of a pair fell out of lockstep.

    ``position`` is the first divergent token index, when applicable.
    """

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position
