"""User-side software: attestation verifier, tunnel pinning, add-on encryption, OTP.

The client never sends a secret until it has pinned a PAL public key
whose quote and measurement log it verified against the published
reference digests. The expected log of a tunnel session is::

    [H(PAL), H(Flicker), H(PM), H(pal_pub || nonce), exit cap]
"""

from __future__ import annotations

import json
import os
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from . import otp, wire
from .artifacts import ReferenceMeasurements
from .crypto import Nonce, PublicKey, Rng, encrypt
from .encoding import pack_fields, u32
from .errors import (
    AuthenticationRefused,
    EncodingError,
    PinError,
    RemoteError,
    TunnelRefused,
)
from .pal import binding_digest
from .proxy.forms import FormSchema, PageKind, decode_creds, encode_creds
from .tpm import DRTM_PCR, MeasurementLog, Quote, verify_quote
from .wire import Frame

PROFILE_VERSION = 1

Transport = Callable[[Frame], Frame]


@dataclass
class ClientProfile:
    user_id: str
    ca_pub: PublicKey
    reference: ReferenceMeasurements
    proxy_address: str = "proxy"
    otp_params: otp.OtpParams | None = None
    otp_cursor: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "version": PROFILE_VERSION,
            "user_id": self.user_id,
            "proxy_address": self.proxy_address,
            "ca_pub": self.ca_pub.encode().hex(),
            "reference": self.reference.encode().hex(),
            "otp_params": self.otp_params.to_line() if self.otp_params else None,
            "otp_cursor": self.otp_cursor,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data: str) -> ClientProfile:
        d = json.loads(data)
        if d.get("version") != PROFILE_VERSION:
            raise EncodingError(f"unsupported profile version {d.get('version')!r}")
        return cls(
            user_id=d["user_id"],
            ca_pub=PublicKey.decode(bytes.fromhex(d["ca_pub"])),
            reference=ReferenceMeasurements.decode(bytes.fromhex(d["reference"])),
            proxy_address=d["proxy_address"],
            otp_params=otp.OtpParams.from_line(d["otp_params"]) if d["otp_params"] else None,
            otp_cursor=int(d["otp_cursor"]),
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> ClientProfile:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class PinnedTunnel:
    tunnel_id: str
    pal_pub: PublicKey
    nonce: Nonce
    established_at: float


@dataclass
class ClientSession:
    session_id: str
    user_id: str
    tunnel: PinnedTunnel
    seq: int = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq


@dataclass(frozen=True)
class Page:
    token: str
    site: str
    page: str
    kind: PageKind
    schema: FormSchema
    fields: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Result:
    site: str
    ok: bool
    detail: str


def check_offer(offer: Frame, challenge: bytes, ca_pub: PublicKey, reference: ReferenceMeasurements, now: float) -> PinnedTunnel:
    """Attestation verifier plus the key-binding check. Raises TunnelRefused."""
    try:
        quote = Quote.decode(offer["quote"])
        log = MeasurementLog.decode(offer["sml"])
        pal_pub = PublicKey.decode(offer["pal_pub"])
        nonce = Nonce(offer["nonce"])
    except (EncodingError, ValueError) as exc:
        raise TunnelRefused("malformed", str(exc)) from None
    verdict = verify_quote(quote, challenge, log, ca_pub, DRTM_PCR)
    if not verdict:
        raise TunnelRefused(verdict.reason)
    got = log.digests()
    want = reference.expected_log(binding_digest(pal_pub, nonce)).digests()
    if len(got) != len(want) or got[:3] != want[:3] or got[4] != want[4]:
        raise TunnelRefused("measurement_mismatch", "measurement log differs from reference")
    if got[3] != want[3]:
        raise TunnelRefused("key_binding", "offered key is not the attested PAL output")
    return PinnedTunnel(offer.text("tunnel_id"), pal_pub, nonce, now)


class Client:
    def __init__(
        self,
        profile: ClientProfile,
        transport: Transport,
        rng: Rng,
        clock: Callable[[], float] = time.time,
        profile_path: str | os.PathLike | None = None,
    ):
        self.profile = profile
        self.transport = transport
        self.rng = rng
        self.clock = clock
        self.profile_path = profile_path
        self.session: ClientSession | None = None

    def _call(self, frame: Frame) -> Frame:
        return wire.expect(self.transport(frame), frame.kind)

    def _persist(self) -> None:
        if self.profile_path is not None:
            self.profile.save(self.profile_path)

    # tunnel

    def establish_tunnel(self, purpose: str) -> PinnedTunnel:
        challenge = self.rng.nonce()
        offer = self._call(wire.make("tunnel.request", purpose=purpose, challenge=challenge))
        return check_offer(offer, challenge, self.profile.ca_pub, self.profile.reference, self.clock())

    def _send_secret(self, tunnel: PinnedTunnel, fields: dict[str, bytes]) -> bytes:
        return encrypt(tunnel.pal_pub, pack_fields(fields), self.rng)

    # registration and authentication

    def register(self, master_password: str, secret_phrase: str, otp_count: int | None = None) -> otp.OtpParams:
        tunnel = self.establish_tunnel("register")
        secret = {
            "master_password": master_password.encode(),
            "secret_phrase": secret_phrase.encode(),
            "user_id": self.profile.user_id.encode(),
        }
        if otp_count is not None:
            secret["otp_count"] = u32(otp_count)
        reply = self._call(wire.make(
            "register.submit", tunnel_id=tunnel.tunnel_id, enc_data=self._send_secret(tunnel, secret)
        ))
        params = otp.OtpParams.from_line(reply.text("otp_params"))
        self.profile.otp_params = params
        self.profile.otp_cursor = 0
        self._persist()
        return params

    def otp_list(self, secret_phrase: str) -> list[str]:
        if self.profile.otp_params is None:
            raise PinError("not registered")
        return [otp.format_password(p) for p in otp.derive_chain(secret_phrase, self.profile.otp_params)]

    def next_otp(self, secret_phrase: str) -> str:
        if self.profile.otp_params is None:
            raise PinError("not registered")
        self.profile.otp_cursor += 1
        self._persist()
        return otp.format_password(otp.password_at(secret_phrase, self.profile.otp_params, self.profile.otp_cursor))

    def authenticate(self, password: str, kind: str = "master") -> ClientSession:
        tunnel = self.establish_tunnel("auth")
        secret = {
            "kind": kind.encode(),
            "password": password.encode(),
            "user_id": self.profile.user_id.encode(),
        }
        try:
            reply = self._call(wire.make(
                "auth.submit", tunnel_id=tunnel.tunnel_id, enc_data=self._send_secret(tunnel, secret)
            ))
        except RemoteError as exc:
            if exc.code == AuthenticationRefused.code:
                raise AuthenticationRefused(exc.detail) from None
            raise
        self.session = ClientSession(reply.text("session"), reply.text("user_id"), tunnel)
        return self.session

    # browsing

    def _require_session(self) -> ClientSession:
        if self.session is None:
            raise PinError("no authenticated session with a pinned tunnel")
        return self.session

    def visit(self, site: str, page: str = "login") -> Page:
        s = self._require_session()
        reply = self._call(wire.make("visit", session=s.session_id, seq=s.next_seq(), site=site, page=page))
        schema = FormSchema.decode(reply["schema"])
        return Page(reply.text("token"), reply.text("site"), reply.text("page"), schema.page_kind, schema,
                    decode_creds(reply["fields"]))

    def addon_encrypt_fields(self, page: Page, values: dict[str, str]) -> bytes | None:
        """Encrypt typed credential fields under the pinned PAL key."""
        s = self._require_session()
        creds = {n: values[n] for n in page.schema.credential_fields if values.get(n)}
        if not creds:
            return None
        return encrypt(s.tunnel.pal_pub, encode_creds(creds), self.rng)

    def _result(self, reply: Frame) -> Result:
        return Result(reply.text("site"), reply.text("status") == "ok", reply.text("detail"))

    def enroll(self, page: Page, values: dict[str, str]) -> Result | None:
        enc = self.addon_encrypt_fields(page, values)
        if enc is None:
            return None
        s = self._require_session()
        return self._result(self._call(wire.make(
            "enroll", session=s.session_id, seq=s.next_seq(), token=page.token, enc_cred=enc
        )))

    def submit(self, page: Page) -> Result:
        s = self._require_session()
        return self._result(self._call(wire.make("submit", session=s.session_id, seq=s.next_seq(), token=page.token)))

    def update(self, page: Page, new_values: dict[str, str]) -> Result | None:
        enc = self.addon_encrypt_fields(page, new_values)
        if enc is None:
            return None
        s = self._require_session()
        return self._result(self._call(wire.make(
            "update", session=s.session_id, seq=s.next_seq(), token=page.token, enc_new_cred=enc
        )))
