"""Credential database: a single-file append log.

File layout::

    b"TIMDB" | u16 version (=1)
    repeat:  u32 length | pack_fields(record)

Every record has a ``type`` field:

* ``cred``: user_id, site_id, enc_cred_with_pal, sealed_pal_priv, nonce,
  form_schema
* ``pass_list``: blob (the sealed pass list)
* ``pm_pub``: blob (the sealed proxy-module public key)
* ``delete``: user_id, site_id

New keys are appended. Replacing or deleting an existing key rewrites
the whole file through a temporary file and ``os.replace``. Nothing in
the file is plaintext credential material.
"""

from __future__ import annotations

import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from ..crypto import Nonce
from ..encoding import pack_fields, read_u32, text, u32, unpack_fields
from ..errors import EncodingError
from .forms import FormSchema

MAGIC = b"TIMDB"
VERSION = 1
_HEADER = MAGIC + struct.pack(">H", VERSION)


@dataclass(frozen=True)
class CredentialRecord:
    user_id: str
    site_id: str
    enc_cred_with_pal: bytes
    sealed_pal_priv: bytes
    nonce: Nonce
    form_schema: FormSchema

    def fields(self) -> dict[str, bytes]:
        return {
            "enc_cred_with_pal": self.enc_cred_with_pal,
            "form_schema": self.form_schema.encode(),
            "nonce": bytes(self.nonce),
            "sealed_pal_priv": self.sealed_pal_priv,
            "site_id": self.site_id.encode(),
            "type": b"cred",
            "user_id": self.user_id.encode(),
        }

    @classmethod
    def from_fields(cls, f: dict[str, bytes]) -> CredentialRecord:
        return cls(
            user_id=text(f["user_id"]),
            site_id=text(f["site_id"]),
            enc_cred_with_pal=f["enc_cred_with_pal"],
            sealed_pal_priv=f["sealed_pal_priv"],
            nonce=Nonce(f["nonce"]),
            form_schema=FormSchema.decode(f["form_schema"]),
        )


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


_SCHEMAS = {
    b"cred": ("enc_cred_with_pal", "form_schema", "nonce", "sealed_pal_priv", "site_id", "type", "user_id"),
    b"pass_list": ("blob", "type"),
    b"pm_pub": ("blob", "type"),
    b"delete": ("site_id", "type", "user_id"),
}


def _key(f: dict[str, bytes]) -> tuple:
    if f["type"] in (b"cred", b"delete"):
        return ("cred", text(f["user_id"]), text(f["site_id"]))
    return (f["type"].decode(),)


class Database:
    """Thread-safe store. ``path=None`` keeps the file image in memory."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = RWLock()
        self._rows: dict[tuple, dict[str, bytes]] = {}
        self._image = _HEADER
        if self.path is not None and self.path.exists():
            self._load(self.path.read_bytes())
        else:
            self._flush(_HEADER)

    # file format

    def _load(self, data: bytes) -> None:
        if not data.startswith(MAGIC) or len(data) < len(_HEADER):
            raise EncodingError("not a credential database")
        (version,) = struct.unpack_from(">H", data, len(MAGIC))
        if version != VERSION:
            raise EncodingError(f"unsupported database version {version}")
        offset = len(_HEADER)
        while offset < len(data):
            size, offset = read_u32(data, offset)
            chunk = data[offset:offset + size]
            if len(chunk) != size:
                raise EncodingError("truncated database record")
            offset += size
            f = unpack_fields(chunk)
            schema = _SCHEMAS.get(f.get("type", b""))
            if schema is None:
                raise EncodingError("unknown database record type")
            f = unpack_fields(chunk, required=schema)
            if f["type"] == b"delete":
                self._rows.pop(_key(f), None)
            else:
                self._rows[_key(f)] = f
        self._image = data

    def _flush(self, image: bytes) -> None:
        self._image = image
        if self.path is None:
            return
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_bytes(image)
        os.replace(tmp, self.path)

    def _append(self, f: dict[str, bytes]) -> None:
        record = pack_fields(f)
        image = self._image + u32(len(record)) + record
        if self.path is None:
            self._image = image
            return
        with open(self.path, "ab") as fh:
            fh.write(u32(len(record)) + record)
        self._image = image

    def _rewrite(self) -> None:
        parts = [_HEADER]
        for key in sorted(self._rows):
            record = pack_fields(self._rows[key])
            parts.append(u32(len(record)) + record)
        self._flush(b"".join(parts))

    def _put(self, f: dict[str, bytes]) -> None:
        key = _key(f)
        existed = key in self._rows
        self._rows[key] = f
        if existed:
            self._rewrite()
        else:
            self._append(f)

    def raw_bytes(self) -> bytes:
        with self._lock.read():
            return self._image

    # records

    def put_record(self, record: CredentialRecord) -> None:
        with self._lock.write():
            self._put(record.fields())

    def get_record(self, user_id: str, site_id: str) -> CredentialRecord | None:
        with self._lock.read():
            f = self._rows.get(("cred", user_id, site_id))
            return CredentialRecord.from_fields(f) if f else None

    def delete_record(self, user_id: str, site_id: str) -> bool:
        with self._lock.write():
            if self._rows.pop(("cred", user_id, site_id), None) is None:
                return False
            self._rewrite()
            return True

    def records(self) -> list[CredentialRecord]:
        with self._lock.read():
            return [CredentialRecord.from_fields(f) for k, f in sorted(self._rows.items()) if k[0] == "cred"]

    def _get_blob(self, kind: str) -> bytes | None:
        with self._lock.read():
            f = self._rows.get((kind,))
            return f["blob"] if f else None

    def _put_blob(self, kind: str, blob: bytes) -> None:
        with self._lock.write():
            self._put({"blob": bytes(blob), "type": kind.encode()})

    @property
    def sealed_pass_list(self) -> bytes | None:
        return self._get_blob("pass_list")

    def set_sealed_pass_list(self, blob: bytes) -> None:
        self._put_blob("pass_list", blob)

    @property
    def sealed_pm_pub(self) -> bytes | None:
        return self._get_blob("pm_pub")

    def set_sealed_pm_pub(self, blob: bytes) -> None:
        self._put_blob("pm_pub", blob)
