"""Target-site stubs speaking the simulated TLS exchange.

A connection starts with ``tls.hello``; the site answers with its
certificate, a connection id and a server nonce. Requests on a
connection carry increasing sequence numbers. The submitted form is
encrypted to the site key and must contain the connection's server
nonce, so a recorded submission cannot be replayed on another
connection. A connection is closed after one submission.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from ..crypto import Certificate, CertificateAuthority, KeyPair, KeyPurpose, Rng, decrypt, generate_keypair
from ..encoding import unpack_fields
from ..errors import IntegrityError, ReplayError, TargetUnavailable, TimError
from ..proxy.forms import FormSchema, PageKind, decode_creds, encode_creds
from .. import wire
from ..wire import Frame

LOGIN = FormSchema(PageKind.LOGIN, ("username", "password"), ("username", "password"))
UPDATE = FormSchema(
    PageKind.UPDATE,
    ("username", "password", "new_password"),
    credential_fields=("new_password",),
    old_credential_fields=("username", "password"),
)
HOME = FormSchema(PageKind.OTHER, ("q",))

DEFAULT_PAGES = {"login": LOGIN, "update": UPDATE, "home": HOME}


@dataclass
class _Conn:
    server_nonce: bytes
    seq: int = 0
    open: bool = True


@dataclass
class TargetSite:
    site_id: str
    keypair: KeyPair
    cert: Certificate
    rng: Rng
    accounts: dict[str, str] = field(default_factory=dict)
    pages: dict[str, FormSchema] = field(default_factory=lambda: dict(DEFAULT_PAGES))
    available: bool = True
    logins: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._conns: dict[bytes, _Conn] = {}
        self._randoms: set[bytes] = set()
        self._lock = threading.Lock()

    @classmethod
    def create(cls, site_id: str, ca: CertificateAuthority, rng: Rng) -> TargetSite:
        kp = generate_keypair(rng, KeyPurpose.SITE)
        return cls(site_id, kp, ca.issue(site_id, kp.public), rng)

    def handle(self, src: str, frame: Frame) -> Frame:
        if not self.available:
            raise TargetUnavailable(f"{self.site_id} is down")
        try:
            if frame.kind == "tls.hello":
                return self._hello(frame)
            if frame.kind == "site.get":
                return self._get(frame)
            if frame.kind == "site.submit":
                return self._submit(frame)
            return wire.error("protocol", f"unexpected {frame.kind}")
        except TimError as exc:
            return wire.error(exc.code, exc.detail or str(exc))

    def _hello(self, frame: Frame) -> Frame:
        random = frame["client_random"]
        with self._lock:
            if random in self._randoms:
                raise ReplayError("client random already seen")
            self._randoms.add(random)
            conn_id = self.rng.bytes(16)
            nonce = self.rng.bytes(20)
            self._conns[conn_id] = _Conn(nonce)
        return wire.make("tls.server_hello", cert=self.cert.encode(), conn_id=conn_id, server_nonce=nonce)

    def _conn(self, frame: Frame) -> _Conn:
        conn = self._conns.get(frame["conn_id"])
        if conn is None or not conn.open:
            raise ReplayError("unknown or closed connection")
        seq = frame.int("seq")
        if seq <= conn.seq:
            raise ReplayError("stale sequence number")
        conn.seq = seq
        return conn

    def _get(self, frame: Frame) -> Frame:
        with self._lock:
            self._conn(frame)
        schema = self.pages.get(frame.text("page"))
        if schema is None:
            return wire.error("not_found", frame.text("page"))
        return wire.make("site.page", page=frame["page"], schema=schema.encode(),
                         fields=encode_creds({n: "" for n in schema.field_names}))

    def _submit(self, frame: Frame) -> Frame:
        with self._lock:
            conn = self._conn(frame)
            conn.open = False
            try:
                body = unpack_fields(decrypt(self.keypair.private, frame["enc_form"]),
                                     required=("fields", "server_nonce"))
            except IntegrityError:
                return wire.make("site.result", status="fail", detail="undecryptable form")
            if body["server_nonce"] != conn.server_nonce:
                raise ReplayError("form was not produced for this connection")
            form = decode_creds(body["fields"])
            page = frame.text("page")
            user, password = form.get("username", ""), form.get("password", "")
            if self.accounts.get(user) != password or not user:
                return wire.make("site.result", status="fail", detail="bad credentials")
            if page == "login":
                self.logins.append(user)
                return wire.make("site.result", status="ok", detail="logged in")
            if page == "update":
                new = form.get("new_password", "")
                if not new:
                    return wire.make("site.result", status="fail", detail="empty new password")
                self.accounts[user] = new
                return wire.make("site.result", status="ok", detail="password changed")
            return wire.make("site.result", status="fail", detail="page has no form action")
