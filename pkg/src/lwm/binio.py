"""Little-endian binary file helpers shared by the LWMF/LWMT/LWMC formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

# Hard cap on any single dimension and on total payload bytes. Protects
# readers from corrupted headers allocating absurd buffers.
MAX_DIM = 2**31 - 1
MAX_PAYLOAD_BYTES = 2**40


class FormatError(ValueError):
    """Base class for binary file format violations."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"expected {n} bytes for {what}, got {len(buf)}")
    return buf


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise BadMagic(f"bad magic: expected {magic!r}, got {got!r}")


def expect_version(f: BinaryIO, expected: int, fmt_name: str) -> None:
    (version,) = struct.unpack("<I", read_exact(f, 4, "version"))
    if version != expected:
        raise VersionMismatch(
            f"{fmt_name} version {version} unsupported (expected {expected})"
        )


def check_dims(dims: tuple[int, ...], itemsize: int) -> int:
    """Validate dimensions and return the payload byte count."""
    total = itemsize
    for d in dims:
        if d < 1 or d > MAX_DIM:
            raise DimensionOverflow(f"dimension {d} out of range [1, {MAX_DIM}]")
        total *= d
        if total > MAX_PAYLOAD_BYTES:
            raise DimensionOverflow(f"payload of {dims} exceeds {MAX_PAYLOAD_BYTES} bytes")
    return total
