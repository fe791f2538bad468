"""Frames exchanged between client, proxy and target sites.

A frame on the wire is::

    u32 length | pack_fields({"kind": <kind>, "body": pack_fields(fields)})

``CATALOG`` lists the closed field schema of every frame kind. Decoding
a frame of an unknown kind, or with unexpected fields, fails.

Client and proxy:

====================  ==========================================  =====================
request               fields                                      reply
====================  ==========================================  =====================
tunnel.request        purpose, challenge                          tunnel.offer
register.submit       tunnel_id, enc_data                         register.result
auth.submit           tunnel_id, enc_data                         auth.result
visit                 session, seq, site, page                    page
enroll                session, seq, token, enc_cred               result
submit                session, seq, token                         result
update                session, seq, token, enc_new_cred           result
====================  ==========================================  =====================

Proxy and target site (simulated TLS):

====================  ==========================================  =====================
tls.hello             client_random                               tls.server_hello
site.get              conn_id, seq, page                          site.page
site.submit           conn_id, seq, page, enc_form                site.result
====================  ==========================================  =====================

Any request may instead be answered with ``error{code, detail}``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

from .encoding import pack_fields, read_u32, text, u32, unpack_fields
from .errors import EncodingError, ProtocolError, RemoteError

CATALOG: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "tunnel.request": (("challenge", "purpose"), ()),
    "tunnel.offer": (("nonce", "pal_pub", "quote", "sml", "tunnel_id"), ()),
    "register.submit": (("enc_data", "tunnel_id"), ()),
    "register.result": (("otp_params", "user_id"), ()),
    "auth.submit": (("enc_data", "tunnel_id"), ()),
    "auth.result": (("session", "user_id"), ()),
    "visit": (("page", "seq", "session", "site"), ()),
    "page": (("fields", "kind", "page", "schema", "site", "token"), ()),
    "enroll": (("enc_cred", "seq", "session", "token"), ()),
    "submit": (("seq", "session", "token"), ()),
    "update": (("enc_new_cred", "seq", "session", "token"), ()),
    "result": (("detail", "site", "status"), ()),
    "error": (("code", "detail"), ()),
    "tls.hello": (("client_random",), ()),
    "tls.server_hello": (("cert", "conn_id", "server_nonce"), ()),
    "site.get": (("conn_id", "page", "seq"), ()),
    "site.page": (("fields", "page", "schema"), ()),
    "site.submit": (("conn_id", "enc_form", "page", "seq"), ()),
    "site.result": (("detail", "status"), ()),
}

REPLIES = {
    "tunnel.request": "tunnel.offer",
    "register.submit": "register.result",
    "auth.submit": "auth.result",
    "visit": "page",
    "enroll": "result",
    "submit": "result",
    "update": "result",
    "tls.hello": "tls.server_hello",
    "site.get": "site.page",
    "site.submit": "site.result",
}


@dataclass(frozen=True)
class Frame:
    kind: str
    fields: Mapping[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CATALOG:
            raise ProtocolError(f"unknown frame kind {self.kind!r}")
        required, optional = CATALOG[self.kind]
        names = set(self.fields)
        if not set(required) <= names or names - set(required) - set(optional):
            raise ProtocolError(f"bad fields for {self.kind}: {sorted(names)}")

    def __getitem__(self, name: str) -> bytes:
        return self.fields[name]

    def text(self, name: str) -> str:
        return text(self.fields[name])

    def int(self, name: str) -> int:
        value, end = read_u32(self.fields[name], 0)
        if end != len(self.fields[name]):
            raise EncodingError(f"{name} is not a u32")
        return value

    def payload(self) -> bytes:
        return pack_fields({"body": pack_fields(dict(self.fields)), "kind": self.kind.encode()})

    def encode(self) -> bytes:
        body = self.payload()
        return u32(len(body)) + body

    @classmethod
    def decode(cls, data: bytes) -> Frame:
        size, offset = read_u32(data, 0)
        if size != len(data) - offset:
            raise EncodingError("frame length prefix does not match")
        return cls.decode_payload(data[offset:])

    @classmethod
    def decode_payload(cls, data: bytes) -> Frame:
        f = unpack_fields(data, required=("body", "kind"))
        kind = text(f["kind"])
        if kind not in CATALOG:
            raise ProtocolError(f"unknown frame kind {kind!r}")
        required, optional = CATALOG[kind]
        return cls(kind, unpack_fields(f["body"], required=required, optional=optional))

    @property
    def is_error(self) -> bool:
        return self.kind == "error"


def make(kind: str, /, **fields: bytes | str | int) -> Frame:
    """Build a frame; str values are utf-8 encoded, ints become u32."""
    out = {}
    for name, value in fields.items():
        if isinstance(value, str):
            value = value.encode()
        elif isinstance(value, int):
            value = u32(value)
        out[name] = bytes(value)
    return Frame(kind, out)


def error(code: str, detail: str = "") -> Frame:
    return make("error", code=code, detail=detail)


def expect(reply: Frame, request_kind: str) -> Frame:
    """Raise on error frames and on replies that were not asked for."""
    if reply.is_error:
        raise RemoteError(reply.text("code"), reply.text("detail"))
    wanted = REPLIES[request_kind]
    if reply.kind != wanted:
        raise ProtocolError(f"expected {wanted}, got unsolicited {reply.kind}")
    return reply
