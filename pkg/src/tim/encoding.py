"""Canonical length-prefixed binary encoding.

Everything that is hashed, sealed, signed or sent over the wire goes
through these helpers, so the encoding has to be deterministic and
strict: one value has exactly one encoding and the decoder rejects
anything else.

Field map (``pack_fields``)::

    u16 count
    repeat count times, names in strictly increasing byte order:
        u16 name_len | name (utf-8) | u32 value_len | value

List (``pack_list``)::

    u32 count
    repeat count times: u32 item_len | item

Integers are unsigned big-endian.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Mapping

from .errors import EncodingError

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


def u32(value: int) -> bytes:
    return _U32.pack(value)


def read_u32(data: bytes, offset: int) -> tuple[int, int]:
    if offset + 4 > len(data):
        raise EncodingError("truncated u32")
    return _U32.unpack_from(data, offset)[0], offset + 4


def pack_int(value: int) -> bytes:
    """Length-prefixed big-endian encoding of a non-negative integer."""
    if value < 0:
        raise ValueError("negative integer")
    raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    return _U32.pack(len(raw)) + raw


def unpack_ints(data: bytes, count: int) -> list[int]:
    out = []
    offset = 0
    for _ in range(count):
        size, offset = read_u32(data, offset)
        if offset + size > len(data) or size == 0:
            raise EncodingError("bad integer field")
        chunk = data[offset:offset + size]
        if size > 1 and chunk[0] == 0:
            raise EncodingError("non-minimal integer encoding")
        out.append(int.from_bytes(chunk, "big"))
        offset += size
    if offset != len(data):
        raise EncodingError("trailing bytes after integers")
    return out


def pack_fields(fields: Mapping[str, bytes]) -> bytes:
    names = sorted(fields, key=lambda n: n.encode())
    parts = [_U16.pack(len(names))]
    for name in names:
        value = fields[name]
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError(f"field {name!r} must be bytes, got {type(value).__name__}")
        raw_name = name.encode()
        parts.append(_U16.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(len(value)))
        parts.append(bytes(value))
    return b"".join(parts)


def unpack_fields(
    data: bytes,
    required: Iterable[str] | None = None,
    optional: Iterable[str] = (),
) -> dict[str, bytes]:
    """Decode a field map.

    With ``required`` given the map is checked against a closed schema:
    every required name must be present and nothing outside
    ``required | optional`` may appear.
    """
    if len(data) < 2:
        raise EncodingError("truncated field map")
    (count,) = _U16.unpack_from(data, 0)
    offset = 2
    out: dict[str, bytes] = {}
    previous = None
    for _ in range(count):
        if offset + 2 > len(data):
            raise EncodingError("truncated field name")
        (name_len,) = _U16.unpack_from(data, offset)
        offset += 2
        raw_name = data[offset:offset + name_len]
        if len(raw_name) != name_len:
            raise EncodingError("truncated field name")
        offset += name_len
        if previous is not None and raw_name <= previous:
            raise EncodingError("field names not in canonical order")
        previous = raw_name
        value_len, offset = read_u32(data, offset)
        value = data[offset:offset + value_len]
        if len(value) != value_len:
            raise EncodingError("truncated field value")
        offset += value_len
        try:
            out[raw_name.decode()] = bytes(value)
        except UnicodeDecodeError as exc:
            raise EncodingError("field name is not utf-8") from exc
    if offset != len(data):
        raise EncodingError("trailing bytes after field map")
    if required is not None:
        required = set(required)
        allowed = required | set(optional)
        missing = required - out.keys()
        if missing:
            raise EncodingError(f"missing fields: {sorted(missing)}")
        unknown = out.keys() - allowed
        if unknown:
            raise EncodingError(f"unknown fields: {sorted(unknown)}")
    return out


def pack_list(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return _U32.pack(len(items)) + b"".join(_U32.pack(len(i)) + bytes(i) for i in items)


def unpack_list(data: bytes) -> list[bytes]:
    count, offset = read_u32(data, 0)
    out = []
    for _ in range(count):
        size, offset = read_u32(data, offset)
        item = data[offset:offset + size]
        if len(item) != size:
            raise EncodingError("truncated list item")
        out.append(bytes(item))
        offset += size
    if offset != len(data):
        raise EncodingError("trailing bytes after list")
    return out


def text(value: bytes) -> str:
    try:
        return value.decode()
    except UnicodeDecodeError as exc:
        raise EncodingError("expected utf-8 text") from exc
