"""Form schemas published by target sites and the proxy's fill rules.

Credential maps are plain ``{field_name: value}`` dicts encoded with
``pack_fields``. On update pages a field named ``new_<x>`` carries the
replacement for stored credential ``<x>``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..crypto import Rng
from ..encoding import pack_fields, pack_list, text, unpack_fields, unpack_list
from ..errors import EncodingError

NEW_PREFIX = "new_"


class PageKind(str, enum.Enum):
    LOGIN = "login"
    UPDATE = "update"
    OTHER = "other"


@dataclass(frozen=True)
class FormSchema:
    page_kind: PageKind
    field_names: tuple[str, ...]
    credential_fields: tuple[str, ...] = ()
    old_credential_fields: tuple[str, ...] = ()

    def __post_init__(self):
        names = set(self.field_names)
        if not set(self.credential_fields) <= names or not set(self.old_credential_fields) <= names:
            raise ValueError("credential fields must be form fields")
        if self.page_kind is not PageKind.OTHER and not self.credential_fields:
            raise ValueError("login and update pages need credential fields")
        if self.old_credential_fields and self.page_kind is not PageKind.UPDATE:
            raise ValueError("only update pages have old credential fields")

    def encode(self) -> bytes:
        return pack_fields({
            "credential_fields": pack_list(n.encode() for n in self.credential_fields),
            "field_names": pack_list(n.encode() for n in self.field_names),
            "old_credential_fields": pack_list(n.encode() for n in self.old_credential_fields),
            "page_kind": self.page_kind.value.encode(),
        })

    @classmethod
    def decode(cls, data: bytes) -> FormSchema:
        f = unpack_fields(
            data, required=("credential_fields", "field_names", "old_credential_fields", "page_kind")
        )
        try:
            return cls(
                page_kind=PageKind(text(f["page_kind"])),
                field_names=tuple(text(n) for n in unpack_list(f["field_names"])),
                credential_fields=tuple(text(n) for n in unpack_list(f["credential_fields"])),
                old_credential_fields=tuple(text(n) for n in unpack_list(f["old_credential_fields"])),
            )
        except ValueError as exc:
            raise EncodingError(str(exc)) from None


def dummy_value(rng: Rng) -> str:
    return rng.bytes(8).hex()


def client_view(schema: FormSchema, has_record: bool, rng: Rng) -> tuple[dict[str, str], set[str]]:
    """Field values the client sees, and which of them are dummies."""
    values = {name: "" for name in schema.field_names}
    dummies: set[str] = set()
    if has_record and schema.page_kind is PageKind.LOGIN:
        dummies = set(schema.credential_fields)
    elif has_record and schema.page_kind is PageKind.UPDATE:
        dummies = set(schema.old_credential_fields)
    for name in sorted(dummies):
        values[name] = dummy_value(rng)
    return values, dummies


def fill_login(schema: FormSchema, creds: dict[str, str]) -> dict[str, str]:
    missing = [n for n in schema.credential_fields if n not in creds]
    if missing:
        raise EncodingError(f"credentials lack fields {missing}")
    return {n: creds.get(n, "") for n in schema.field_names}


def fill_update(schema: FormSchema, old: dict[str, str], new: dict[str, str]) -> dict[str, str]:
    form = {n: "" for n in schema.field_names}
    for n in schema.old_credential_fields:
        if n not in old:
            raise EncodingError(f"stored credentials lack {n!r}")
        form[n] = old[n]
    for n in schema.credential_fields:
        if n not in new:
            raise EncodingError(f"new credentials lack {n!r}")
        form[n] = new[n]
    return form


def merge_update(old: dict[str, str], new: dict[str, str]) -> dict[str, str]:
    merged = dict(old)
    for name, value in new.items():
        if name.startswith(NEW_PREFIX):
            merged[name[len(NEW_PREFIX):]] = value
        else:
            merged[name] = value
    return merged


def encode_creds(creds: dict[str, str]) -> bytes:
    return pack_fields({k: v.encode() for k, v in creds.items()})


def decode_creds(data: bytes) -> dict[str, str]:
    return {k: text(v) for k, v in unpack_fields(data).items()}
