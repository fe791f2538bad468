"""Append-only record of everything observable during a run.

File layout::

    b"TIMTR" | u16 version (=1) | u32 count
    repeat count times: u32 length | pack_fields(record)

Each record has a ``type`` field, one of ``frame``, ``envelope``,
``event``, ``pcr``, plus type-specific fields. A multi-scenario file
(``tim run all``) is ``b"TIMTX" | u16 version | pack_list`` of
``pack_fields({"name", "transcript"})``.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from ..encoding import pack_fields, pack_list, read_u32, text, u32, unpack_fields, unpack_list
from ..errors import EncodingError

MAGIC = b"TIMTR"
BUNDLE_MAGIC = b"TIMTX"
VERSION = 1


@dataclass(frozen=True)
class Record:
    type: str
    fields: dict[str, bytes]

    def get(self, name: str) -> str:
        return text(self.fields[name])

    def encode(self) -> bytes:
        return pack_fields({**self.fields, "type": self.type.encode()})

    @classmethod
    def decode(cls, data: bytes) -> Record:
        f = unpack_fields(data)
        kind = f.pop("type", None)
        if kind is None:
            raise EncodingError("record without type")
        return cls(text(kind), f)


class Transcript:
    def __init__(self):
        self.records: list[Record] = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def add(self, type: str, **fields: bytes | str | int) -> int:
        out = {}
        for k, v in fields.items():
            if isinstance(v, str):
                v = v.encode()
            elif isinstance(v, int):
                v = u32(v)
            out[k] = bytes(v)
        with self._lock:
            self.records.append(Record(type, out))
            return len(self.records) - 1

    def add_frame(self, src: str, dst: str, direction: str, data: bytes) -> int:
        return self.add("frame", src=src, dst=dst, dir=direction, data=data)

    def add_envelope(self, name: str, data: bytes) -> int:
        return self.add("envelope", file=name, data=data)

    def add_event(self, name: str, detail: str = "") -> int:
        return self.add("event", name=name, detail=detail)

    def add_pcr(self, index: int, label: str, measurement: bytes, value: bytes) -> int:
        return self.add("pcr", index=index, label=label, measurement=measurement, value=value)

    def of_type(self, type: str) -> list[tuple[int, Record]]:
        return [(i, r) for i, r in enumerate(self.records) if r.type == type]

    def encode(self) -> bytes:
        with self._lock:
            parts = [MAGIC, struct.pack(">H", VERSION), u32(len(self.records))]
            for r in self.records:
                body = r.encode()
                parts.append(u32(len(body)) + body)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> Transcript:
        if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 6:
            raise EncodingError("not a transcript")
        (version,) = struct.unpack_from(">H", data, len(MAGIC))
        if version != VERSION:
            raise EncodingError(f"unsupported transcript version {version}")
        count, offset = read_u32(data, len(MAGIC) + 2)
        t = cls()
        for _ in range(count):
            size, offset = read_u32(data, offset)
            chunk = data[offset:offset + size]
            if len(chunk) != size:
                raise EncodingError("truncated transcript record")
            t.records.append(Record.decode(chunk))
            offset += size
        if offset != len(data):
            raise EncodingError("trailing bytes after transcript")
        return t


def encode_bundle(items: list[tuple[str, Transcript]]) -> bytes:
    return BUNDLE_MAGIC + struct.pack(">H", VERSION) + pack_list(
        pack_fields({"name": name.encode(), "transcript": t.encode()}) for name, t in items
    )


def decode_bundle(data: bytes) -> list[tuple[str, Transcript]]:
    if not data.startswith(BUNDLE_MAGIC):
        raise EncodingError("not a transcript bundle")
    (version,) = struct.unpack_from(">H", data, len(BUNDLE_MAGIC))
    if version != VERSION:
        raise EncodingError(f"unsupported bundle version {version}")
    out = []
    for item in unpack_list(data[len(BUNDLE_MAGIC) + 2:]):
        f = unpack_fields(item, required=("name", "transcript"))
        out.append((text(f["name"]), Transcript.decode(f["transcript"])))
    return out
