"""The proxy module: boot, initial sealing, and every client-facing protocol.

``handle(frame)`` is the single entry point for client frames; it never
raises, failures come back as ``error`` frames carrying the error code.
Target sites are reached through ``site_call(site_id, frame)``.
"""

from __future__ import annotations

import hmac
import threading
from collections.abc import Callable
from dataclasses import dataclass

from ..artifacts import Platform, ReferenceMeasurements
from ..crypto import (
    Certificate,
    KeyPair,
    KeyPurpose,
    Nonce,
    PublicKey,
    Rng,
    decrypt,
    digest,
    encrypt,
    generate_keypair,
)
from ..encoding import pack_fields, unpack_fields
from ..errors import (
    AttestationError,
    AuthenticationRefused,
    BootRefused,
    CertificateError,
    CredentialAccessDenied,
    IntegrityError,
    ProtocolError,
    ReplayError,
    TimError,
)
from ..pal import VERDICT_PASS, Option, PalEnvelope, binding_digest, request
from ..tpm import DRTM_PCR, PROXY_KEY_PCR, Tpm, verify_quote
from .. import wire
from ..wire import Frame
from .boot import BootManifest, BootReport, trusted_boot
from .database import CredentialRecord, Database
from .flicker import Flicker, Invocation
from .forms import (
    PageKind,
    FormSchema,
    client_view,
    decode_creds,
    encode_creds,
    fill_login,
    fill_update,
    merge_update,
)
from .session import DEFAULT_IDLE_TIMEOUT, PageContext, SessionState, SessionTable

SiteCall = Callable[[str, Frame], Frame]
PURPOSES = ("register", "auth")


@dataclass(frozen=True)
class PendingTunnel:
    purpose: str
    pal_pub: PublicKey
    sealed_pal_priv: bytes
    nonce: Nonce


class ProxyModule:
    def __init__(
        self,
        *,
        tpm: Tpm,
        platform: Platform,
        ca_pub: PublicKey,
        reference: ReferenceMeasurements,
        db: Database,
        rng: Rng,
        clock: Callable[[], float],
        site_call: SiteCall,
        manifest: BootManifest | None = None,
        idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
        workdir=None,
    ):
        self.tpm = tpm
        self.platform = platform
        self.ca_pub = ca_pub
        self.reference = reference
        self.manifest = manifest or BootManifest.from_reference(reference)
        self.db = db
        self.rng = rng
        self.clock = clock
        self.site_call = site_call
        self.flicker = Flicker(tpm, platform, rng.fork("pal"), workdir)
        self.sessions = SessionTable(rng.fork("sessions"), clock, idle_timeout)
        self.pm: KeyPair | None = None
        self.started = False
        self.event_hook: Callable[[str, str], None] | None = None
        self._pending: dict[str, PendingTunnel] = {}
        self._challenges: set[bytes] = set()
        self._lock = threading.Lock()
        # serializes read-modify-write of the sealed pass list
        self._pass_list_lock = threading.Lock()

    def _event(self, name: str, detail: str = "") -> None:
        if self.event_hook is not None:
            self.event_hook(name, detail)

    # startup

    def start(self) -> BootReport:
        report = trusted_boot(self.manifest, self.platform)
        self._event("boot", "measurements match manifest")
        self.pm = generate_keypair(self.rng, KeyPurpose.PROXY)
        pm_pub = self.pm.public.encode()
        self.tpm.extend(PROXY_KEY_PCR, digest(pm_pub), "pm_pub")
        if digest(self.platform.read("pal")) != self.reference.pal:
            raise BootRefused("pal")
        self.initial_sealing(pm_pub)
        self.started = True
        self._event("started", "initial sealing complete")
        return report

    def initial_sealing(self, pm_pub: bytes) -> bytes:
        inv = self.flicker.invoke(request(Option.INITIAL_SEALING, pm_pub=pm_pub))
        out = PalEnvelope.decode(inv.output).raise_for_status()
        self.db.set_sealed_pm_pub(out.payload["sealed_pm_pub"])
        return out.payload["sealed_pm_pub"]

    # dispatch

    def handle(self, frame: Frame) -> Frame:
        handler = {
            "tunnel.request": self.handle_tunnel_request,
            "register.submit": self.handle_registration,
            "auth.submit": self.handle_authentication,
            "visit": self.intercept,
            "enroll": self.handle_enrollment,
            "submit": self.handle_submission,
            "update": self.handle_update,
        }.get(frame.kind)
        if handler is None:
            return wire.error("protocol", f"unexpected frame {frame.kind}")
        if not self.started:
            return wire.error("not_started", "proxy service is not running")
        try:
            return handler(frame)
        except TimError as exc:
            self._event("refused", f"{frame.kind}: {exc.code}")
            return wire.error(exc.code, exc.detail or str(exc))
        except (ValueError, KeyError) as exc:
            self._event("refused", f"{frame.kind}: malformed")
            return wire.error("malformed", str(exc))

    # tunnels and attestation

    def _invoke(self, option: Option, quote_nonce: bytes | None = None, **payload: bytes) -> tuple[PalEnvelope, Invocation]:
        inv = self.flicker.invoke(request(option, **payload), quote_nonce)
        return PalEnvelope.decode(inv.output).raise_for_status(), inv

    def _self_attest(self, inv: Invocation, nonce: bytes, output_digest: bytes) -> None:
        verdict = verify_quote(inv.quote, nonce, inv.log, self.ca_pub, DRTM_PCR)
        if not verdict:
            raise AttestationError(f"self-attestation failed: {verdict.reason}")
        if inv.log.digests() != self.reference.expected_log(output_digest).digests():
            raise AttestationError("self-attestation failed: measurement_mismatch")

    def handle_tunnel_request(self, frame: Frame) -> Frame:
        purpose = frame.text("purpose")
        challenge = Nonce(frame["challenge"])
        if purpose not in PURPOSES:
            raise ProtocolError(f"unknown tunnel purpose {purpose!r}")
        with self._lock:
            if challenge in self._challenges:
                raise ReplayError("attestation challenge already used")
            self._challenges.add(challenge)
        out, inv = self._invoke(Option.SECURE_TUNNEL, quote_nonce=challenge)
        pending = PendingTunnel(
            purpose,
            PublicKey.decode(out.payload["pal_pub"]),
            out.payload["sealed_pal_priv"],
            Nonce(out.payload["nonce"]),
        )
        tunnel_id = self.rng.bytes(16).hex()
        with self._lock:
            self._pending[tunnel_id] = pending
        return wire.make(
            "tunnel.offer",
            tunnel_id=tunnel_id,
            pal_pub=out.payload["pal_pub"],
            nonce=out.payload["nonce"],
            quote=inv.quote.encode(),
            sml=inv.log.encode(),
        )

    def _take_tunnel(self, tunnel_id: str, purpose: str) -> PendingTunnel:
        with self._lock:
            pending = self._pending.pop(tunnel_id, None)
        if pending is None:
            raise ReplayError("unknown or already used tunnel")
        if pending.purpose != purpose:
            raise ProtocolError(f"tunnel was opened for {pending.purpose}")
        return pending

    def handle_registration(self, frame: Frame) -> Frame:
        t = self._take_tunnel(frame.text("tunnel_id"), "register")
        payload = dict(enc_data=frame["enc_data"], sealed_pal_priv=t.sealed_pal_priv, nonce=t.nonce)
        with self._pass_list_lock:
            if self.db.sealed_pass_list is not None:
                payload["sealed_pass_list"] = self.db.sealed_pass_list
            out, _ = self._invoke(Option.REGISTRATION, **payload)
            self.db.set_sealed_pass_list(out.payload["sealed_pass_list"])
        self._event("registered", out.payload["user_id"].decode())
        return wire.make("register.result", otp_params=out.payload["otp_params"], user_id=out.payload["user_id"])

    def handle_authentication(self, frame: Frame) -> Frame:
        t = self._take_tunnel(frame.text("tunnel_id"), "auth")
        own_nonce = self.rng.nonce()
        with self._pass_list_lock:
            plist = self.db.sealed_pass_list
            if plist is None:
                raise AuthenticationRefused("no users are registered")
            out, inv = self._invoke(
                Option.AUTHENTICATION,
                quote_nonce=own_nonce,
                enc_data=frame["enc_data"],
                sealed_pal_priv=t.sealed_pal_priv,
                nonce=t.nonce,
                sealed_pass_list=plist,
            )
            if "sealed_pass_list" in out.payload:
                self.db.set_sealed_pass_list(out.payload["sealed_pass_list"])
        verdict = out.payload["verdict"]
        self._self_attest(inv, own_nonce, digest(verdict))
        if verdict != VERDICT_PASS:
            raise AuthenticationRefused("invalid user id or password")
        user_id = out.payload["user_id"].decode()
        s = self.sessions.create(user_id, t.pal_pub, t.sealed_pal_priv, t.nonce)
        self._event("authenticated", user_id)
        return wire.make("auth.result", session=s.session_id, user_id=user_id)

    # credential decryption

    def credential_decryption(self, enc_cred_with_pal: bytes, sealed_pal_priv: bytes, nonce: bytes) -> dict[str, str]:
        sealed_pm_pub = self.db.sealed_pm_pub
        if sealed_pm_pub is None:
            raise CredentialAccessDenied("no sealed proxy key")
        nonce_prime = self.rng.nonce()
        out, _ = self._invoke(
            Option.CREDENTIAL_DECRYPTION,
            enc_cred_with_pal=enc_cred_with_pal,
            sealed_pal_priv=sealed_pal_priv,
            nonce=nonce,
            sealed_pm_pub=sealed_pm_pub,
            nonce_prime=nonce_prime,
        )
        try:
            plain = decrypt(self.pm.private, out.payload["enc_cred_with_pm"])
        except IntegrityError:
            raise CredentialAccessDenied("PAL output is not readable with this proxy key") from None
        f = unpack_fields(plain, required=("credentials", "nonce_prime"))
        if not hmac.compare_digest(f["nonce_prime"], nonce_prime):
            raise ReplayError("nonce' mismatch in PAL output")
        return decode_creds(f["credentials"])

    # target sites

    def _connect(self, site: str, page: str) -> tuple[PublicKey, bytes, bytes, Frame]:
        hello = wire.expect(self.site_call(site, wire.make("tls.hello", client_random=self.rng.bytes(20))), "tls.hello")
        cert = Certificate.decode(hello["cert"])
        if not cert.verify(self.ca_pub) or cert.subject != site:
            raise CertificateError(f"certificate for {site!r} did not verify")
        conn_id, server_nonce = hello["conn_id"], hello["server_nonce"]
        got = wire.expect(self.site_call(site, wire.make("site.get", conn_id=conn_id, seq=1, page=page)), "site.get")
        return cert.public_key, conn_id, server_nonce, got

    def _submit_form(self, ctx: PageContext, form: dict[str, str]) -> tuple[bool, str]:
        body = pack_fields({"fields": encode_creds(form), "server_nonce": ctx.server_nonce})
        frame = wire.make(
            "site.submit",
            conn_id=ctx.conn_id,
            seq=ctx.site_seq,
            page=ctx.page,
            enc_form=encrypt(ctx.site_pub, body, self.rng),
        )
        reply = wire.expect(self.site_call(ctx.site, frame), "site.submit")
        return reply.text("status") == "ok", reply.text("detail")

    def _result(self, site: str, ok: bool, detail: str) -> Frame:
        return wire.make("result", status="ok" if ok else "fail", site=site, detail=detail)

    def intercept(self, frame: Frame) -> Frame:
        s = self.sessions.require(frame.text("session"), frame.int("seq"))
        site, page = frame.text("site"), frame.text("page")
        site_pub, conn_id, server_nonce, got = self._connect(site, page)
        schema = FormSchema.decode(got["schema"])
        has_record = self.db.get_record(s.user_id, site) is not None
        values, _ = client_view(schema, has_record, self.rng)
        ctx = PageContext(site, page, schema, site_pub, conn_id, server_nonce, 2, has_record)
        token = self.sessions.add_page(s, ctx)
        return wire.make(
            "page",
            token=token,
            site=site,
            page=page,
            kind=schema.page_kind.value,
            schema=schema.encode(),
            fields=encode_creds(values),
        )

    def _page(self, frame: Frame, kind: PageKind) -> tuple[SessionState, PageContext]:
        s = self.sessions.require(frame.text("session"), frame.int("seq"))
        ctx = self.sessions.take_page(s, frame.text("token"))
        if ctx.schema.page_kind is not kind:
            raise ProtocolError(f"page is not a {kind.value} page")
        return s, ctx

    def handle_enrollment(self, frame: Frame) -> Frame:
        s, ctx = self._page(frame, PageKind.LOGIN)
        enc = frame["enc_cred"]
        creds = self.credential_decryption(enc, s.sealed_pal_priv, s.nonce)
        ok, detail = self._submit_form(ctx, fill_login(ctx.schema, creds))
        creds.clear()
        if ok:
            self.db.put_record(CredentialRecord(s.user_id, ctx.site, enc, s.sealed_pal_priv, s.nonce, ctx.schema))
            self._event("enrolled", f"{s.user_id}@{ctx.site}")
        return self._result(ctx.site, ok, detail)

    def _record(self, s: SessionState, site: str) -> CredentialRecord:
        record = self.db.get_record(s.user_id, site)
        if record is None:
            raise ProtocolError(f"no enrolled credentials for {site!r}")
        return record

    def handle_submission(self, frame: Frame) -> Frame:
        s, ctx = self._page(frame, PageKind.LOGIN)
        record = self._record(s, ctx.site)
        creds = self.credential_decryption(record.enc_cred_with_pal, record.sealed_pal_priv, record.nonce)
        ok, detail = self._submit_form(ctx, fill_login(ctx.schema, creds))
        creds.clear()
        self._event("submitted", f"{s.user_id}@{ctx.site}")
        return self._result(ctx.site, ok, detail)

    def _fresh_key(self) -> tuple[PublicKey, bytes, Nonce]:
        own_nonce = self.rng.nonce()
        out, inv = self._invoke(Option.SECURE_TUNNEL, quote_nonce=own_nonce)
        pal_pub = PublicKey.decode(out.payload["pal_pub"])
        nonce = Nonce(out.payload["nonce"])
        self._self_attest(inv, own_nonce, binding_digest(pal_pub, nonce))
        return pal_pub, out.payload["sealed_pal_priv"], nonce

    def handle_update(self, frame: Frame) -> Frame:
        s, ctx = self._page(frame, PageKind.UPDATE)
        record = self._record(s, ctx.site)
        new = self.credential_decryption(frame["enc_new_cred"], s.sealed_pal_priv, s.nonce)
        old = self.credential_decryption(record.enc_cred_with_pal, record.sealed_pal_priv, record.nonce)
        ok, detail = self._submit_form(ctx, fill_update(ctx.schema, old, new))
        if ok:
            merged = merge_update(old, new)
            pal_pub, sealed, nonce = self._fresh_key()
            enc = encrypt(pal_pub, encode_creds(merged), self.rng)
            merged.clear()
            self.db.put_record(CredentialRecord(s.user_id, ctx.site, enc, sealed, nonce, record.form_schema))
            self._event("updated", f"{s.user_id}@{ctx.site}")
        new.clear()
        old.clear()
        return self._result(ctx.site, ok, detail)
