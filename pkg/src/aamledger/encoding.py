"""Deterministic, injective byte encoding for chain payloads.

Wire format (all integers big-endian)::

    0x00                         None
    0x01 / 0x02                  False / True
    0x03 i64                     integer
    0x04 i64                     real on the 1e-6 grid, as micro-units
    0x05 f64                     measurement real (IEEE-754 bits)
    0x06 u32 len, utf-8          string
    0x07 u32 len, raw            bytes
    0x08 u32 count, items        sequence (decoded as tuple)
    0x09 u16 len, name,
         u16 nfields, values     registered record, fields in declaration order
    0x0A u16 len, name,
         u16 len, member         registered enum member

Reals default to the grid encoding.  A dataclass field declared with
``field(metadata=F64)`` carries measurements (arrival times, residuals) and
encodes every float inside it as raw IEEE-754 bits instead.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import struct
from typing import Any

from .grid import GridViolation, INT64_MAX, INT64_MIN, to_micro, from_micro

F64 = {"f64": True}

_RECORDS: dict[str, type] = {}
_ENUMS: dict[str, type] = {}


class UnrepresentableValue(ValueError):
    pass


class DecodeError(ValueError):
    pass


def register(cls):
    """Class decorator: make a dataclass or Enum encodable by name."""
    name = cls.__name__
    if issubclass(cls, enum.Enum):
        table = _ENUMS
    elif dataclasses.is_dataclass(cls):
        table = _RECORDS
    else:
        raise TypeError(f"{name} is neither a dataclass nor an Enum")
    if name in table and table[name] is not cls:
        raise TypeError(f"duplicate encodable name {name}")
    table[name] = cls
    return cls


def _short(s: str) -> bytes:
    raw = s.encode()
    return struct.pack(">H", len(raw)) + raw


def _encode(value: Any, out: bytearray, f64: bool) -> None:
    if value is None:
        out.append(0x00)
    elif value is True:
        out.append(0x02)
    elif value is False:
        out.append(0x01)
    elif isinstance(value, enum.Enum):
        name = type(value).__name__
        if _ENUMS.get(name) is not type(value):
            raise UnrepresentableValue(f"unregistered enum {name}")
        out.append(0x0A)
        out += _short(name) + _short(value.name)
    elif isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise UnrepresentableValue(f"integer {value} exceeds 64 bits")
        out.append(0x03)
        out += struct.pack(">q", value)
    elif isinstance(value, float):
        if f64:
            if math.isnan(value):
                raise UnrepresentableValue("NaN has no canonical encoding")
            out.append(0x05)
            out += struct.pack(">d", value + 0.0)  # folds -0.0 into 0.0
        else:
            try:
                n = to_micro(value)
            except GridViolation as exc:
                raise UnrepresentableValue(str(exc)) from None
            out.append(0x04)
            out += struct.pack(">q", n)
    elif isinstance(value, str):
        raw = value.encode()
        out.append(0x06)
        out += struct.pack(">I", len(raw)) + raw
    elif isinstance(value, (bytes, bytearray)):
        out.append(0x07)
        out += struct.pack(">I", len(value)) + bytes(value)
    elif isinstance(value, (list, tuple)):
        out.append(0x08)
        out += struct.pack(">I", len(value))
        for item in value:
            _encode(item, out, f64)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        name = type(value).__name__
        if _RECORDS.get(name) is not type(value):
            raise UnrepresentableValue(f"unregistered record {name}")
        fields = [f for f in dataclasses.fields(value) if f.init]
        out.append(0x09)
        out += _short(name) + struct.pack(">H", len(fields))
        for f in fields:
            _encode(getattr(value, f.name), out, f64 or bool(f.metadata.get("f64")))
    else:
        raise UnrepresentableValue(f"cannot encode {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    out = bytearray()
    _encode(value, out, False)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated input")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def short(self) -> str:
        return self.take(self.unpack(">H")).decode()

    def value(self) -> Any:
        tag = self.take(1)[0]
        if tag == 0x00:
            return None
        if tag in (0x01, 0x02):
            return tag == 0x02
        if tag == 0x03:
            return self.unpack(">q")
        if tag == 0x04:
            return from_micro(self.unpack(">q"))
        if tag == 0x05:
            return self.unpack(">d")
        if tag == 0x06:
            return self.take(self.unpack(">I")).decode()
        if tag == 0x07:
            return self.take(self.unpack(">I"))
        if tag == 0x08:
            return tuple(self.value() for _ in range(self.unpack(">I")))
        if tag == 0x09:
            name = self.short()
            cls = _RECORDS.get(name)
            if cls is None:
                raise DecodeError(f"unknown record {name}")
            values = [self.value() for _ in range(self.unpack(">H"))]
            try:
                return cls(*values)
            except (TypeError, ValueError) as exc:
                raise DecodeError(f"invalid {name}: {exc}") from None
        if tag == 0x0A:
            name, member = self.short(), self.short()
            cls = _ENUMS.get(name)
            if cls is None or member not in cls.__members__:
                raise DecodeError(f"unknown enum {name}.{member}")
            return cls[member]
        raise DecodeError(f"bad tag 0x{tag:02x}")


def canonical_decode(data: bytes) -> Any:
    reader = _Reader(data)
    value = reader.value()
    if reader.pos != len(data):
        raise DecodeError("trailing bytes")
    return value
