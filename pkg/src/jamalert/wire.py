"""Canonical byte packing for everything that gets signed or replayed.

One fixed layout, big-endian throughout:

    u8 / u16 / u32   unsigned integers
    f64              IEEE-754 double
    str              u16 length + UTF-8 bytes
    blob             u16 length + raw bytes
    list             u16 count + items

Encoding the same value twice yields identical bytes, and decode(encode(x))
round-trips exactly; duplicate detection and signatures both lean on that.
"""

from __future__ import annotations

import struct
from typing import List, Tuple


class MalformedBytes(Exception):
    """Input does not parse as the claimed structure."""


class Writer:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack(">d", v))
        return self

    def text(self, v: str) -> "Writer":
        raw = v.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string too long")
        return self.u16(len(raw))._raw(raw)

    def blob(self, v: bytes) -> "Writer":
        if len(v) > 0xFFFF:
            raise ValueError("blob too long")
        return self.u16(len(v))._raw(v)

    def _raw(self, v: bytes) -> "Writer":
        self._parts.append(v)
        return self

    def done(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise MalformedBytes("truncated input")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack(">B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def text(self) -> str:
        n = self.u16()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedBytes("bad utf-8") from exc

    def blob(self) -> bytes:
        return self._take(self.u16())

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise MalformedBytes("trailing bytes")


def pack_point(w: Writer, p: Tuple[float, float]) -> None:
    w.f64(p[0]).f64(p[1])


def unpack_point(r: Reader) -> Tuple[float, float]:
    return (r.f64(), r.f64())
