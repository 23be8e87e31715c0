"""Exception hierarchy shared across the package.

CLI exit code mapping: ConfigError -> 2, protocol-level failures -> 3,
IntegrityError -> 4.
"""


class CaosError(Exception):
    """Base class for all package errors."""


class ConfigError(CaosError):
    """Invalid deployment configuration; message names the offending field."""


class CodecError(CaosError):
    """Malformed plaintext block layout or wrong payload length."""


class IntegrityError(CaosError):
    """Authenticated decryption failed: corrupted slot or foreign key."""


class ProtocolError(CaosError):
    """Malformed or unexpected wire traffic.

    `offset` points at the byte where decoding gave up, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class LockedError(CaosError):
    """Server refused a read because a requested position holds a live lock."""


class StaleTokenError(CaosError):
    """Server refused a write: token unknown, expired, or covering other positions."""


class ServerError(CaosError):
    """Server replied with an error code the client cannot recover from."""


class AccessError(CaosError):
    """An access gave up after exhausting its retry budget."""


class CapacityError(CaosError):
    """Requested sizing cannot fit (store positions or buffer slots)."""


class MapLookupError(CaosError):
    """A block id is missing from the client map: corrupted map or store."""
