"""Fixed plaintext block layout plus randomized authenticated encryption.

Every slot in a store holds the same number of bytes regardless of what it
contains, so the server cannot tell a free slot from a data block. The
sealed record is nonce || ciphertext || tag (AES-128-GCM): authentication
is not needed against an honest-but-curious server, but it turns storage
corruption into a detectable error instead of silent map divergence.

Plain layout, little-endian: bid u64 | cns u32 | ts u64 | data[block_size].
"""

from __future__ import annotations

import os
import secrets
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .core import BlockPlain
from .errors import CodecError, IntegrityError

KEY_BYTES = 16
NONCE_BYTES = 12
TAG_BYTES = 16
META_BYTES = 20  # bid u64 + cns u32 + ts u64

_META = struct.Struct("<QIQ")


def plain_size(block_size: int) -> int:
    return META_BYTES + block_size


def sealed_size(block_size: int) -> int:
    """On-disk / on-wire record length for one sealed block."""
    return NONCE_BYTES + plain_size(block_size) + TAG_BYTES


def keygen(security_parameter: int = 128) -> bytes:
    """Fresh 128-bit store key from the OS CSPRNG."""
    if security_parameter != 128:
        raise CodecError(f"unsupported security parameter {security_parameter}; only 128 is supported")
    return secrets.token_bytes(KEY_BYTES)


def encode_block(block: BlockPlain, block_size: int) -> bytes:
    if len(block.data) != block_size:
        raise CodecError(f"payload is {len(block.data)} bytes, block size is {block_size}")
    return _META.pack(block.bid, block.cns, block.ts) + block.data


def decode_block(raw: bytes, block_size: int) -> BlockPlain:
    if len(raw) != plain_size(block_size):
        raise CodecError(f"plaintext is {len(raw)} bytes, expected {plain_size(block_size)}")
    bid, cns, ts = _META.unpack_from(raw, 0)
    return BlockPlain(bid, cns, ts, raw[META_BYTES:])


def seal(key: bytes, block: BlockPlain, block_size: int, rng=None) -> bytes:
    """Encrypt a block under a fresh random nonce.

    Two seals of the same plaintext differ. Pass a seeded `rng` (anything
    with .randbytes) for reproducible simulation runs; nonces come from the
    OS otherwise.
    """
    nonce = rng.randbytes(NONCE_BYTES) if rng is not None else os.urandom(NONCE_BYTES)
    ct = AESGCM(key).encrypt(nonce, encode_block(block, block_size), None)
    return nonce + ct


def open_sealed(key: bytes, sealed: bytes, block_size: int) -> BlockPlain:
    if len(sealed) != sealed_size(block_size):
        raise CodecError(f"sealed record is {len(sealed)} bytes, expected {sealed_size(block_size)}")
    nonce, ct = sealed[:NONCE_BYTES], sealed[NONCE_BYTES:]
    try:
        plain = AESGCM(key).decrypt(nonce, ct, None)
    except InvalidTag:
        raise IntegrityError("sealed block failed authentication") from None
    return decode_block(plain, block_size)


def save_key(path, key: bytes) -> None:
    if len(key) != KEY_BYTES:
        raise CodecError(f"key must be {KEY_BYTES} bytes")
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(key)


def load_key(path) -> bytes:
    with open(path, "rb") as f:
        key = f.read()
    if len(key) != KEY_BYTES:
        raise CodecError(f"key file holds {len(key)} bytes, expected {KEY_BYTES}")
    return key
