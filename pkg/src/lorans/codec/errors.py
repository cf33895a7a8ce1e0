"""Exceptions raised by the frame codec."""


class CodecError(ValueError):
    """Base class for all frame-level decoding and encoding errors."""


class TooShort(CodecError):
    pass


class UnknownMType(CodecError):
    pass


class MalformedFOpts(CodecError):
    pass


class InvariantViolation(CodecError):
    pass


class BadLength(CodecError):
    pass


class TruncatedPayload(CodecError):
    def __init__(self, message, decoded=()):
        super().__init__(message)
        self.decoded = list(decoded)


class UnknownCid(CodecError):
    """Raised when a MAC command id is not in the table.

    The remainder of the stream cannot be decoded because command lengths are
    implied by the id, so the commands decoded before the bad id are kept on
    ``decoded``.
    """

    def __init__(self, cid, decoded=()):
        super().__init__("unknown MAC command id 0x%02x" % cid)
        self.cid = cid
        self.decoded = list(decoded)
