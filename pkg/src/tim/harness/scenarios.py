"""Builtin scenarios: the honest flow and one attack per defended threat.

A scenario script drives a ``World`` through named stages. The first
``TimError`` ends the run and is classified into an ``Outcome``; any
other exception means the script itself is broken (``ScenarioInvalid``).
A scenario passes iff the observed outcome equals the expected one, the
failure was detected no later than the claimed stage, and the leak
detector found nothing.
"""

from __future__ import annotations

import enum
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from ..crypto import CertificateAuthority, KeyPurpose, digest, generate_keypair
from ..errors import BootRefused, PalError, RemoteError, ScenarioInvalid, TimError, TunnelRefused
from ..pal import Option, PalEnvelope
from ..proxy.module import ProxyModule
from ..tpm import PROXY_KEY_PCR, SealedBlob
from ..wire import Frame
from .leaks import Finding, leak_detector
from .network import Redirect
from .sites import TargetSite
from .transcript import Transcript
from .world import PROXY, World


class Outcome(str, enum.Enum):
    DETECTED_AT_BOOT = "detected_at_boot"
    ATTESTATION_FAILURE = "attestation_failure"
    SEAL_VIOLATION = "seal_violation"
    REPLAY_REJECTED = "replay_rejected"
    TUNNEL_REFUSED = "tunnel_refused"
    CREDENTIAL_ACCESS_DENIED = "credential_access_denied"
    AUTHENTICATION_REFUSED = "authentication_refused"
    FLOW_SUCCEEDS = "flow_succeeds"


STAGES = ("boot", "initial-sealing", "register", "authenticate", "enroll", "submit", "update")

MASTER = "correct horse battery staple"
PHRASE = "purple monkey dishwasher"
OTP_COUNT = 20
ACCOUNTS = {
    "bank.example": ("ada.lovelace", "Engine#1843"),
    "mail.example": ("ada@analytical", "Notes&G-1842"),
}
NEW_BANK_PASSWORD = "Difference!1822"

_ATTESTATION_REASONS = {"bad_aik_cert", "bad_signature", "log_mismatch", "measurement_mismatch", "wrong_pcr", "malformed"}
_SEAL_CODES = {"seal_violation", "integrity", "unknown_blob", "key_provenance"}


class FlowFailed(TimError):
    code = "flow_failed"


class Run:
    """Handle passed to scripts: stage markers, checks, mutation primitives."""

    def __init__(self, world: World):
        self.world = world
        self.stage_name = "setup"
        self.accepted_otps: set[str] = set()
        self.last_password: str | None = None
        world.event_listeners.append(self._on_proxy_event)

    def _on_proxy_event(self, name: str, detail: str) -> None:
        # trusted boot passed inside ProxyModule.start; sealing comes next
        if name == "boot" and self.stage_name == "boot":
            self.stage("initial-sealing")

    def stage(self, name: str) -> None:
        if name not in STAGES:
            raise ScenarioInvalid(f"unknown stage {name!r}")
        self.stage_name = name
        self.world.transcript.add_event("stage", name)

    def require(self, cond: bool, what: str) -> None:
        if not cond:
            raise FlowFailed(what)

    # mutation primitives

    def tamper(self, module: str) -> None:
        self.world.platform.tamper(module)
        self.world.transcript.add_event("attack", f"tamper {module}")

    def tap(self, fn) -> None:
        self.world.network.taps.append(fn)

    def input_hook(self, fn) -> None:
        self.world.proxy.flicker.input_hooks.append(fn)

    def output_hook(self, fn) -> None:
        self.world.proxy.flicker.output_hooks.append(fn)

    # client helpers that keep the secret registry current

    def authenticate(self, client, password: str, kind: str = "master"):
        self.last_password = password
        session = client.authenticate(password, kind)
        if kind == "otp":
            self.accepted_otps.add(password)
        return session

    def next_otp(self, client) -> str:
        pw = client.next_otp(PHRASE)
        self.world.secrets.add(f"otp:{client.profile.otp_cursor}", pw)
        return pw


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    expected: Outcome
    claim_stage: str
    script: Callable[[World, Run], None]

    @property
    def is_attack(self) -> bool:
        return self.expected is not Outcome.FLOW_SUCCEEDS


@dataclass
class Report:
    name: str
    expected: Outcome
    observed: str
    claim_stage: str
    detected_stage: str | None
    detected_step: int | None
    detail: str
    transcript: Transcript
    findings: list[Finding] = field(default_factory=list)

    @property
    def in_time(self) -> bool:
        if self.detected_stage is None:
            return self.expected is Outcome.FLOW_SUCCEEDS
        return STAGES.index(self.detected_stage) <= STAGES.index(self.claim_stage)

    @property
    def passed(self) -> bool:
        return self.observed == self.expected.value and self.in_time and not self.findings

    def pcr_history(self) -> list[tuple[int, str, bytes]]:
        out = []
        for _, r in self.transcript.of_type("pcr"):
            index = int.from_bytes(r.fields["index"], "big")
            out.append((index, r.get("label"), r.fields["value"]))
        return out


def classify(exc: TimError, run: Run) -> str:
    if isinstance(exc, BootRefused):
        return Outcome.DETECTED_AT_BOOT.value
    if isinstance(exc, TunnelRefused):
        if exc.reason == "nonce_mismatch":
            return Outcome.REPLAY_REJECTED.value
        if exc.reason == "key_binding":
            return Outcome.TUNNEL_REFUSED.value
        if exc.reason in _ATTESTATION_REASONS:
            return Outcome.ATTESTATION_FAILURE.value
        return f"unexpected:{exc.reason}"
    code = exc.code
    if code == "boot_refused":
        return Outcome.DETECTED_AT_BOOT.value
    if code == "replay":
        return Outcome.REPLAY_REJECTED.value
    if code == "target_certificate":
        return Outcome.TUNNEL_REFUSED.value
    if code in _SEAL_CODES:
        return Outcome.SEAL_VIOLATION.value
    if code == "credential_access_denied":
        return Outcome.CREDENTIAL_ACCESS_DENIED.value
    if code == "attestation":
        return Outcome.ATTESTATION_FAILURE.value
    if code == "auth_failed":
        # a refused password the harness saw accepted before is a replay
        if run.last_password in run.accepted_otps:
            return Outcome.REPLAY_REJECTED.value
        return Outcome.AUTHENTICATION_REFUSED.value
    return f"unexpected:{code}"


def run_scenario(scenario: Scenario, seed: int = 7) -> Report:
    world = World(seed)
    run = Run(world)
    world.transcript.add_event("scenario", scenario.name)
    observed, detail, stage, step = Outcome.FLOW_SUCCEEDS.value, "", None, None
    try:
        scenario.script(world, run)
    except ScenarioInvalid:
        raise
    except TimError as exc:
        observed = classify(exc, run)
        detail = f"{exc.code}: {exc.detail or exc}"
        stage = run.stage_name if run.stage_name in STAGES else None
        step = world.transcript.add_event("detected", detail)
    except Exception as exc:
        raise ScenarioInvalid(f"{scenario.name}: script error {exc!r}") from exc
    findings = leak_detector(world.transcript, world.secrets, world.files())
    world.transcript.add_event("outcome", observed)
    return Report(scenario.name, scenario.expected, observed, scenario.claim_stage, stage, step,
                  detail, world.transcript, findings)


# shared script fragments

def _accounts(w: World) -> None:
    for site, (user, pw) in ACCOUNTS.items():
        w.add_account(site, user, pw)
    w.secrets.add("master", MASTER)
    w.secrets.add("phrase", PHRASE)
    w.secrets.add("bank:new_password", NEW_BANK_PASSWORD)


def _boot(w: World, run: Run) -> None:
    run.stage("boot")
    w.boot()


def _register(w: World, run: Run, user: str = "alice"):
    client = w.new_client(user)
    run.stage("register")
    client.register(MASTER, PHRASE, otp_count=OTP_COUNT)
    return client


def _enroll(w: World, run: Run, client, site: str) -> None:
    page = client.visit(site, "login")
    run.require(all(v == "" for v in page.fields.values()), "fresh login page must have empty fields")
    user, pw = ACCOUNTS[site]
    result = client.enroll(page, {"username": user, "password": pw})
    run.require(result is not None and result.ok, f"enrollment at {site} failed")


def _submit(w: World, run: Run, client, site: str) -> None:
    page = client.visit(site, "login")
    real = set(ACCOUNTS[site]) | {NEW_BANK_PASSWORD}
    run.require(all(page.fields[n] and page.fields[n] not in real for n in page.schema.credential_fields),
                "login page must carry dummy credentials")
    result = client.submit(page)
    run.require(result.ok, f"submission at {site} failed: {result.detail}")


def _enrolled(w: World, run: Run, site: str = "bank.example"):
    _accounts(w)
    _boot(w, run)
    client = _register(w, run)
    run.stage("authenticate")
    run.authenticate(client, MASTER)
    run.stage("enroll")
    _enroll(w, run, client, site)
    return client


# scripts

def honest(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    alice = _register(w, run)
    run.stage("authenticate")
    run.authenticate(alice, MASTER)
    run.authenticate(alice, run.next_otp(alice), "otp")
    run.stage("enroll")
    for site in ACCOUNTS:
        _enroll(w, run, alice, site)
    run.stage("submit")
    for site in ACCOUNTS:
        _submit(w, run, alice, site)
    run.stage("update")
    page = alice.visit("bank.example", "update")
    result = alice.update(page, {"new_password": NEW_BANK_PASSWORD})
    run.require(result is not None and result.ok, "update failed")
    bank_user = ACCOUNTS["bank.example"][0]
    run.require(w.sites["bank.example"].accounts[bank_user] == NEW_BANK_PASSWORD, "site kept old password")
    run.stage("submit")
    before = len(w.sites["bank.example"].logins)
    _submit(w, run, alice, "bank.example")
    run.require(len(w.sites["bank.example"].logins) == before + 1, "login with new credentials not seen")
    records = {(r.user_id, r.site_id) for r in w.db.records()}
    run.require(records == {("alice", s) for s in ACCOUNTS}, f"unexpected records {records}")


def tamper_pre_boot(module: str):
    def script(w: World, run: Run) -> None:
        _accounts(w)
        run.tamper(module)
        _boot(w, run)
    return script


def tamper_proxy_post_boot(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    run.tamper("proxy")
    _register(w, run)


def tamper_post_enrollment(module: str):
    def script(w: World, run: Run) -> None:
        client = _enrolled(w, run)
        run.tamper(module)
        run.stage("submit")
        _submit(w, run, client, "bank.example")
    return script


def forge_pcr15(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    run.stage("initial-sealing")
    evil = generate_keypair(w.rng.fork("attacker"), KeyPurpose.PROXY)
    w.tpm.extend(PROXY_KEY_PCR, digest(evil.public.encode()), "attacker")
    w.proxy.initial_sealing(evil.public.encode())


def _rewrite_envelope(data: bytes, option: Option, fn) -> bytes:
    try:
        env = PalEnvelope.decode(data)
    except TimError:
        return data
    if env.option != option.value:
        return data
    return PalEnvelope(env.option, fn(dict(env.payload))).encode()


def mutate_pal_input(w: World, run: Run) -> None:
    client = _enrolled(w, run)

    def flip(payload):
        blob = SealedBlob.decode(payload["sealed_pal_priv"])
        ct = bytearray(blob.ciphertext)
        ct[len(ct) // 2] ^= 0x01
        payload["sealed_pal_priv"] = SealedBlob(bytes(ct), blob.pcr_index, blob.pcr_value_at_seal,
                                                blob.seal_id, blob.srk_id).encode()
        return payload

    run.input_hook(lambda data: _rewrite_envelope(data, Option.CREDENTIAL_DECRYPTION, flip))
    run.stage("submit")
    _submit(w, run, client, "bank.example")


def mutate_pal_output(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    client = _register(w, run)
    evil = generate_keypair(w.rng.fork("attacker"), KeyPurpose.PAL)

    def swap(payload):
        if payload.get("status") == b"ok" and "pal_pub" in payload:
            payload["pal_pub"] = evil.public.encode()
        return payload

    run.output_hook(lambda data: _rewrite_envelope(data, Option.SECURE_TUNNEL, swap))
    run.stage("authenticate")
    run.authenticate(client, MASTER)


def replay_auth_quote(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    client = _register(w, run)
    run.stage("authenticate")
    offers: list[Frame] = []

    def record(src, dst, frame):
        if frame.kind == "tunnel.offer":
            if offers and replaying:
                return offers[0]
            offers.append(frame)
        return frame

    replaying = False
    run.tap(record)
    run.authenticate(client, MASTER)
    replaying = True
    run.authenticate(client, MASTER)


def replay_encrypted_credentials(w: World, run: Run) -> None:
    client = _enrolled(w, run)
    captured: list[bytes] = []

    def capture(payload):
        if "enc_cred_with_pm" in payload:
            if captured:
                payload["enc_cred_with_pm"] = captured[0]
            else:
                captured.append(payload["enc_cred_with_pm"])
        return payload

    run.output_hook(lambda data: _rewrite_envelope(data, Option.CREDENTIAL_DECRYPTION, capture))
    run.stage("submit")
    _submit(w, run, client, "bank.example")
    _submit(w, run, client, "bank.example")


def forge_target_certificate(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    client = _register(w, run)
    run.stage("authenticate")
    run.authenticate(client, MASTER)
    rogue_ca = CertificateAuthority(w.rng.fork("rogue-ca"), name="rogue-ca")
    evil = TargetSite.create("bank.example", rogue_ca, w.rng.fork("evil-site"))
    w.network.register("evil", evil.handle)

    def redirect(src, dst, frame):
        if src == PROXY and dst == "bank.example":
            return Redirect("evil", frame)
        return frame

    run.tap(redirect)
    run.stage("enroll")
    _enroll(w, run, client, "bank.example")


def otp_from_untrusted_client(w: World, run: Run) -> None:
    _accounts(w)
    _boot(w, run)
    alice = _register(w, run)
    run.stage("authenticate")
    otp = run.next_otp(alice)
    keylogged = otp
    run.authenticate(alice, otp, "otp")
    mallory = w.new_client("alice", name="mallory")
    run.authenticate(mallory, keylogged, "otp")


class MaliciousCopy(ProxyModule):
    """Byte-identical proxy code run by an attacker with its own key pair.

    Its own initial sealing is refused (PCR15 already holds the genuine
    key), so it carries on with the sealed key it finds in the database.
    """

    def initial_sealing(self, pm_pub: bytes) -> bytes:
        try:
            return super().initial_sealing(pm_pub)
        except PalError:
            return self.db.sealed_pm_pub


def malicious_copy(w: World, run: Run) -> None:
    client = _enrolled(w, run)
    copy = w.make_proxy(w.rng.fork("malicious-copy"), cls=MaliciousCopy)
    copy.start()
    w.install(copy)
    w.transcript.add_event("attack", "malicious copy serving")
    run.stage("authenticate")
    run.authenticate(client, MASTER)
    run.stage("submit")
    _submit(w, run, client, "bank.example")


def builtin_scenarios() -> list[Scenario]:
    return [
        Scenario("honest", "register, authenticate (master and OTP), enroll at two sites, submit, "
                 "update, submit again", Outcome.FLOW_SUCCEEDS, "update", honest),
        Scenario("tamper-proxy-pre-boot", "proxy module modified before reboot",
                 Outcome.DETECTED_AT_BOOT, "boot", tamper_pre_boot("proxy")),
        Scenario("tamper-flicker-pre-boot", "Flicker module modified before reboot",
                 Outcome.DETECTED_AT_BOOT, "boot", tamper_pre_boot("flicker")),
        Scenario("tamper-proxy-post-boot", "proxy module modified while running",
                 Outcome.ATTESTATION_FAILURE, "register", tamper_proxy_post_boot),
        Scenario("tamper-flicker-post-boot", "Flicker module modified while running",
                 Outcome.SEAL_VIOLATION, "submit", tamper_post_enrollment("flicker")),
        Scenario("tamper-pal", "PAL image modified on disk",
                 Outcome.SEAL_VIOLATION, "submit", tamper_post_enrollment("pal")),
        Scenario("forge-pcr15", "attacker extends PCR15 with its own key and requests sealing",
                 Outcome.SEAL_VIOLATION, "initial-sealing", forge_pcr15),
        Scenario("mutate-pal-input", "sealed PAL key altered in the PAL input file",
                 Outcome.SEAL_VIOLATION, "submit", mutate_pal_input),
        Scenario("mutate-pal-output", "PAL public key replaced in the PAL output file",
                 Outcome.TUNNEL_REFUSED, "authenticate", mutate_pal_output),
        Scenario("replay-auth-quote", "old tunnel offer and quote replayed to the client",
                 Outcome.REPLAY_REJECTED, "authenticate", replay_auth_quote),
        Scenario("replay-encrypted-credentials", "old credential ciphertext replayed in PAL output",
                 Outcome.REPLAY_REJECTED, "submit", replay_encrypted_credentials),
        Scenario("forge-target-certificate", "proxy-to-site traffic redirected to an impostor",
                 Outcome.TUNNEL_REFUSED, "enroll", forge_target_certificate),
        Scenario("otp-from-untrusted-client", "keylogged one-time password replayed",
                 Outcome.REPLAY_REJECTED, "authenticate", otp_from_untrusted_client),
        Scenario("malicious-copy-of-proxy", "identical proxy code run with an attacker key",
                 Outcome.CREDENTIAL_ACCESS_DENIED, "submit", malicious_copy),
    ]


def scenario_by_name(name: str) -> Scenario:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    raise ScenarioInvalid(f"no scenario named {name!r}")


def stress(seed: int = 7, clients: int = 16) -> tuple[World, list[BaseException]]:
    """Run full flows for many users in parallel against one proxy."""
    w = World(seed)
    w.boot()
    errors: list[BaseException] = []
    lock = threading.Lock()

    def drive(i: int) -> None:
        try:
            site = "bank.example" if i % 2 else "mail.example"
            user, pw = f"user{i:02d}", f"site-pass-{i:02d}"
            w.sites[site].accounts[user] = pw
            c = w.new_client(f"u{i:02d}", name=f"stress-{i:02d}")
            c.register(f"master-{i:02d}", f"phrase-{i:02d}", otp_count=5)
            c.authenticate(f"master-{i:02d}")
            page = c.visit(site)
            result = c.enroll(page, {"username": user, "password": pw})
            if not result or not result.ok:
                raise RuntimeError(f"enroll failed for {user}")
            result = c.submit(c.visit(site))
            if not result.ok:
                raise RuntimeError(f"submit failed for {user}")
        except BaseException as exc:
            with lock:
                errors.append(exc)

    threads = [threading.Thread(target=drive, args=(i,)) for i in range(clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return w, errors


def drtm_sessions_interleaved(transcript: Transcript) -> bool:
    """True if any DRTM launch happened while another session was open."""
    open_ = False
    for _, r in transcript.of_type("pcr"):
        label = r.get("label")
        if label == "drtm-reset":
            if open_:
                return True
            open_ = True
        elif label == "drtm-exit":
            open_ = False
    return False


__all__ = [
    "Outcome", "Report", "Run", "Scenario", "builtin_scenarios", "classify", "run_scenario",
    "scenario_by_name", "stress", "drtm_sessions_interleaved", "RemoteError",
]
