"""Authenticated sealing of 4KB pages on the donee side.

Pages are encrypted with AES-128-GCM before they leave the donee. The swap
offset of the page is bound into the ciphertext as associated data (8-byte
little-endian), so a page served back for the wrong offset fails
authentication exactly like a tampered one. The authentication tag and nonce
never travel: the donee keeps them in its translation table and only the
4096-byte ciphertext body is stored remotely.

Nonces are 96-bit values built from a per-key random 32-bit salt plus a
64-bit counter, so no (key, nonce) pair is ever reused.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .wire import PAGE_SIZE

KEY_SIZE = 16
TAG_SIZE = 16
NONCE_SIZE = 12


class CryptoError(Exception):
    """Base class for sealing failures."""


class RngFailure(CryptoError):
    """The platform randomness source is unavailable."""


class BadLength(CryptoError):
    pass


class IntegrityViolation(CryptoError):
    """Tag verification failed: tampered ciphertext, wrong offset, or wrong key."""


class PageKey:
    """A 128-bit page encryption key with its private nonce sequence.

    The key is tied to one donee node. It must never be serialized to the
    wire or shared with a donor; repr() deliberately masks the key bytes.
    """

    __slots__ = ("key_bytes", "_aead", "_salt", "_counter", "_lock")

    def __init__(self, key_bytes: bytes):
        if len(key_bytes) != KEY_SIZE:
            raise BadLength(f"key must be {KEY_SIZE} bytes, got {len(key_bytes)}")
        self.key_bytes = bytes(key_bytes)
        self._aead = AESGCM(self.key_bytes)
        try:
            self._salt = os.urandom(4)
        except NotImplementedError as exc:  # pragma: no cover
            raise RngFailure("no CSPRNG available for nonce salt") from exc
        self._counter = 0
        self._lock = threading.Lock()

    def _next_nonce(self) -> bytes:
        with self._lock:
            counter = self._counter
            self._counter += 1
        return self._salt + counter.to_bytes(8, "little")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PageKey):
            return NotImplemented
        return self.key_bytes == other.key_bytes

    def __hash__(self) -> int:
        return hash(self.key_bytes)

    def __repr__(self) -> str:
        return "PageKey(<128-bit key withheld>)"


@dataclass(frozen=True, slots=True)
class SealedPage:
    ciphertext: bytes  # exactly PAGE_SIZE: GCM adds no body expansion
    mac: bytes         # 16-byte authentication tag, donee-local only
    nonce: bytes       # 12-byte unique value, donee-local only


def generate_key() -> PageKey:
    """Draw a fresh 128-bit key from the OS CSPRNG."""
    try:
        key_bytes = os.urandom(KEY_SIZE)
    except NotImplementedError as exc:  # pragma: no cover
        raise RngFailure("no CSPRNG available") from exc
    return PageKey(key_bytes)


def _offset_ad(offset: int) -> bytes:
    return struct.pack("<Q", offset)


def seal_page(key: PageKey, plaintext: bytes, offset: int) -> SealedPage:
    """Encrypt one 4KB page, binding it to its swap offset.

    Each call consumes a fresh nonce from the key's sequence, so sealing the
    same page twice yields different ciphertexts.
    """
    if len(plaintext) != PAGE_SIZE:
        raise BadLength(f"page must be {PAGE_SIZE} bytes, got {len(plaintext)}")
    nonce = key._next_nonce()
    blob = key._aead.encrypt(nonce, plaintext, _offset_ad(offset))
    return SealedPage(ciphertext=blob[:PAGE_SIZE], mac=blob[PAGE_SIZE:], nonce=nonce)


def open_page(key: PageKey, sealed: SealedPage, offset: int) -> bytes:
    """Decrypt and authenticate a sealed page for the given swap offset.

    Raises IntegrityViolation when the tag does not verify. Callers treat
    that as fatal: a mismatch means the remotely stored ciphertext was
    modified or substituted.
    """
    if len(sealed.ciphertext) != PAGE_SIZE:
        raise BadLength(f"ciphertext must be {PAGE_SIZE} bytes, got {len(sealed.ciphertext)}")
    try:
        return key._aead.decrypt(sealed.nonce, sealed.ciphertext + sealed.mac, _offset_ad(offset))
    except InvalidTag as exc:
        raise IntegrityViolation(f"page authentication failed for offset {offset}") from exc
