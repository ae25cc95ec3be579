"""Keccak digests and the nibble paths derived from them.

A path is a plain tuple of ints in ``[0, 15]``.  Leaf indexings derived from a
32-byte digest are always 64 nibbles long; node remainders and extension
prefixes are shorter sub-paths.
"""

from __future__ import annotations

from Crypto.Hash import keccak as _keccak

Nibbles = tuple[int, ...]

INDEXING_LENGTH = 64


class StructuralError(ValueError):
    """Malformed digest, address or path."""


def keccak256(data: bytes) -> bytes:
    return _keccak.new(digest_bits=256, data=data).digest()


EMPTY_CODE_HASH = keccak256(b"")


def path_from_digest(digest: bytes) -> Nibbles:
    if len(digest) != 32:
        raise StructuralError(f"digest must be 32 bytes, got {len(digest)}")
    out = []
    for byte in digest:
        out.append(byte >> 4)
        out.append(byte & 0x0F)
    return tuple(out)


def digest_from_path(path: Nibbles) -> bytes:
    check_indexing(path)
    return bytes((path[i] << 4) | path[i + 1] for i in range(0, INDEXING_LENGTH, 2))


def nibbles_from_hex(text: str) -> Nibbles:
    """``"0x111d1f3"`` -> ``(1, 1, 1, 13, 1, 15, 3)``; odd lengths allowed."""
    text = text[2:] if text.startswith(("0x", "0X")) else text
    try:
        return tuple(int(c, 16) for c in text)
    except ValueError:
        raise StructuralError(f"not a hex nibble string: {text!r}") from None


def nibbles_to_hex(path: Nibbles) -> str:
    return "".join("0123456789abcdef"[n] for n in path)


def pad_path(path: Nibbles, length: int = INDEXING_LENGTH) -> Nibbles:
    """Right-pad a short illustrative path with zero nibbles."""
    if len(path) > length:
        raise StructuralError(f"path longer than {length} nibbles")
    return tuple(path) + (0,) * (length - len(path))


def indexing_from_hex(text: str) -> Nibbles:
    """Parse a hex indexing, zero-padding figure-style short keys to 64 nibbles."""
    return pad_path(nibbles_from_hex(text))


def check_indexing(path: Nibbles) -> Nibbles:
    if len(path) != INDEXING_LENGTH:
        raise StructuralError(f"indexing must have {INDEXING_LENGTH} nibbles, got {len(path)}")
    for n in path:
        if not 0 <= n <= 15:
            raise StructuralError(f"nibble out of range: {n}")
    return path


def common_prefix_length(a: Nibbles, b: Nibbles) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def account_indexing(address: bytes) -> Nibbles:
    if len(address) != 20:
        raise StructuralError(f"address must be 20 bytes, got {len(address)}")
    return path_from_digest(keccak256(address))


def mapping_slot(mapping_key: bytes, position: int) -> bytes:
    """Storage slot of ``mapping[key]`` for a mapping declared at ``position``."""
    if len(mapping_key) != 32:
        raise StructuralError(f"mapping key must be 32 bytes, got {len(mapping_key)}")
    if position < 0:
        raise StructuralError("mapping position must be non-negative")
    return keccak256(mapping_key + position.to_bytes(32, "big"))


def slot_indexing(mapping_key: bytes, position: int) -> Nibbles:
    return path_from_digest(keccak256(mapping_slot(mapping_key, position)))


def storage_indexing(slot: bytes) -> Nibbles:
    """Storage-trie indexing of a raw 32-byte slot."""
    if len(slot) != 32:
        raise StructuralError(f"slot must be 32 bytes, got {len(slot)}")
    return path_from_digest(keccak256(slot))
