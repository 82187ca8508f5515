"""Exception hierarchy shared across the link, key-management and tunnel layers."""


class QkdError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(QkdError, ValueError):
    pass


class InsufficientMaterial(QkdError):
    """Not enough reconciled bits left to amplify into key material."""


class InvalidKeySize(QkdError, ValueError):
    pass


class KmeError(QkdError):
    """An error reported by a key management entity.

    ``status`` mirrors the HTTP status code the REST surface returns.
    """

    status = 500

    def __init__(self, message, offending_key_id=None):
        super().__init__(message)
        self.message = message
        self.offending_key_id = offending_key_id

    def to_body(self):
        body = {"message": self.message}
        if self.offending_key_id is not None:
            body["offending_key_ID"] = self.offending_key_id
        return body


class BadRequest(KmeError):
    status = 400


class Unauthorized(KmeError):
    status = 401


class NotFound(KmeError):
    status = 404


class UnknownKey(NotFound):
    """A key_ID is unknown to the KME or has already been consumed."""


class KeysExhausted(KmeError):
    status = 503


class KmeTransportError(QkdError):
    """The KME could not be reached or returned garbage."""


class NoKeysAvailable(QkdError):
    """The key pool is empty and the KME could not refill it in time."""


class BadIdentity(QkdError, ValueError):
    """A PSK identity did not match the two-member JSON schema."""


class ProtocolError(QkdError):
    """A QSTP peer violated the wire protocol; carries the alert code to send."""

    def __init__(self, message, alert=5):
        super().__init__(message)
        self.alert = alert


class ReplayRejected(QkdError):
    """An OTP frame named a key_ID already present in the ledger."""


class FramingError(QkdError, ValueError):
    pass
