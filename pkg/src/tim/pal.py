"""The PAL: security-critical code executed inside a DRTM session.

Every invocation runs four phases:

1. measure and extend: PCR18 is extended with H(flicker) then H(proxy),
   unconditionally, before the input is even parsed;
2. input: the envelope is decoded against a closed per-option schema;
3. main operation: exactly one block runs;
4. output: an envelope carrying ``status`` is returned.

Blocks seal everything to PCR18 while it holds the post-phase-1 chain
value, so a later session with the same PAL, Flicker and proxy images
can unseal it and nothing else can. Anything a block learns in plaintext
leaves the PAL only encrypted: to the proxy module's sealed public key
(credentials) or not at all (passwords, phrases, private keys).

Envelope encoding::

    pack_fields({"option": <name>, "payload": pack_fields(payload)})

Errors never raise out of ``run_pal``; they become
``{"status": "error", "code": <code>, "detail": <text>}``.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from collections.abc import Mapping
from dataclasses import dataclass, field

from . import otp
from .crypto import (
    ZERO_DIGEST,
    Digest,
    KeyPurpose,
    Nonce,
    PrivateKey,
    PublicKey,
    Rng,
    decrypt,
    digest,
    encrypt,
    generate_keypair,
    wipe,
)
from .encoding import pack_fields, pack_list, read_u32, text, u32, unpack_fields, unpack_list
from .errors import (
    EncodingError,
    EnvelopeError,
    KeyProvenanceError,
    PalError,
    ReplayError,
    TimError,
)
from .tpm import DRTM_PCR, PROXY_KEY_PCR, SealedBlob, Tpm, extend_value

VERSION = "1.0"

VERDICT_PASS = b"\x01"
VERDICT_FAIL = b"\x00"

PBKDF2_ITERATIONS = 10_000
SALT_SIZE = 20
_DUMMY_SALT = b"\x00" * SALT_SIZE


class Option(str, enum.Enum):
    INITIAL_SEALING = "initial_sealing"
    SECURE_TUNNEL = "secure_tunnel"
    DATA_EXTRACTION = "data_extraction"
    REGISTRATION = "registration"
    AUTHENTICATION = "authentication"
    CREDENTIAL_DECRYPTION = "credential_decryption"


# (required, optional) payload fields per option
INPUT_SCHEMAS: dict[Option, tuple[tuple[str, ...], tuple[str, ...]]] = {
    Option.INITIAL_SEALING: (("pm_pub",), ()),
    Option.SECURE_TUNNEL: ((), ()),
    Option.DATA_EXTRACTION: (("enc_data", "nonce", "nonce_prime", "sealed_pal_priv", "sealed_pm_pub"), ()),
    Option.REGISTRATION: (("enc_data", "nonce", "sealed_pal_priv"), ("sealed_pass_list",)),
    Option.AUTHENTICATION: (("enc_data", "nonce", "sealed_pal_priv", "sealed_pass_list"), ()),
    Option.CREDENTIAL_DECRYPTION: (
        ("enc_cred_with_pal", "nonce", "nonce_prime", "sealed_pal_priv", "sealed_pm_pub"),
        (),
    ),
}

# Plaintext records carried inside ``enc_data``.
REGISTRATION_DATA = (("master_password", "secret_phrase", "user_id"), ("otp_count",))
AUTHENTICATION_DATA = (("kind", "password", "user_id"), ())


@dataclass(frozen=True)
class PalImage:
    code_bytes: bytes
    version: str = VERSION

    @property
    def measurement(self) -> Digest:
        return digest(self.code_bytes)


@dataclass(frozen=True)
class ModuleImages:
    """The Flicker and proxy-module images the PAL measures in phase 1."""

    flicker: bytes
    proxy: bytes


@dataclass(frozen=True)
class PalEnvelope:
    option: str
    payload: Mapping[str, bytes] = field(default_factory=dict)

    def encode(self) -> bytes:
        return pack_fields({"option": self.option.encode(), "payload": pack_fields(dict(self.payload))})

    @classmethod
    def decode(cls, data: bytes) -> PalEnvelope:
        f = unpack_fields(data, required=("option", "payload"))
        return cls(text(f["option"]), unpack_fields(f["payload"]))

    @property
    def ok(self) -> bool:
        return self.payload.get("status") == b"ok"

    def raise_for_status(self) -> PalEnvelope:
        if self.payload.get("status") == b"ok":
            return self
        if self.payload.get("status") != b"error":
            raise EnvelopeError("output envelope has no status")
        raise PalError(
            text(self.payload.get("code", b"error")),
            text(self.payload.get("detail", b"")),
        )


def error_envelope(option: str, code: str, detail: str = "") -> PalEnvelope:
    return PalEnvelope(option, {"status": b"error", "code": code.encode(), "detail": detail.encode()})


# pass list

@dataclass(frozen=True)
class PassEntry:
    user_id: str
    salt: bytes
    master_hash: bytes
    otp_head: Digest
    otp_remaining: int
    otp_params: otp.OtpParams

    def encode(self) -> bytes:
        return pack_fields({
            "master_hash": self.master_hash,
            "otp_head": self.otp_head,
            "otp_params": self.otp_params.to_line().encode(),
            "otp_remaining": u32(self.otp_remaining),
            "salt": self.salt,
            "user_id": self.user_id.encode(),
        })

    @classmethod
    def decode(cls, data: bytes) -> PassEntry:
        f = unpack_fields(
            data,
            required=("master_hash", "otp_head", "otp_params", "otp_remaining", "salt", "user_id"),
        )
        remaining, end = read_u32(f["otp_remaining"], 0)
        if end != len(f["otp_remaining"]):
            raise EncodingError("bad otp_remaining")
        return cls(
            user_id=text(f["user_id"]),
            salt=f["salt"],
            master_hash=f["master_hash"],
            otp_head=Digest(f["otp_head"]),
            otp_remaining=remaining,
            otp_params=otp.OtpParams.from_line(text(f["otp_params"])),
        )

    @property
    def chain(self) -> otp.OtpChain:
        return otp.OtpChain(self.otp_head, self.otp_remaining)


@dataclass(frozen=True)
class PassList:
    entries: tuple[PassEntry, ...] = ()

    def get(self, user_id: str) -> PassEntry | None:
        for e in self.entries:
            if e.user_id == user_id:
                return e
        return None

    def upsert(self, entry: PassEntry) -> PassList:
        rest = [e for e in self.entries if e.user_id != entry.user_id]
        return PassList(tuple(sorted(rest + [entry], key=lambda e: e.user_id)))

    def __len__(self):
        return len(self.entries)

    def encode(self) -> bytes:
        return pack_list(e.encode() for e in self.entries)

    @classmethod
    def decode(cls, data: bytes) -> PassList:
        entries = tuple(PassEntry.decode(item) for item in unpack_list(data))
        if len({e.user_id for e in entries}) != len(entries):
            raise EncodingError("duplicate user in pass list")
        return cls(entries)


def hash_master(password: str, salt: bytes) -> bytes:
    return hashlib.pbkdf2_hmac("sha1", password.encode(), salt, PBKDF2_ITERATIONS, dklen=20)


def binding_digest(pal_pub: PublicKey, nonce: bytes) -> Digest:
    """What the tunnel block extends into PCR18 to vouch for its output."""
    return digest(pal_pub.encode() + bytes(nonce))


# session

class _Session:
    """State for one PAL run. Holds the TPM and the run's RNG."""

    def __init__(self, tpm: Tpm, rng: Rng):
        self.tpm = tpm
        self.rng = rng

    def seal(self, plaintext: bytes) -> bytes:
        return self.tpm.seal(plaintext, DRTM_PCR).encode()

    def unseal(self, blob: bytes) -> bytes:
        return self.tpm.unseal(SealedBlob.decode(blob))

    def pal_key(self, sealed_pal_priv: bytes, nonce: bytes) -> PrivateKey:
        f = unpack_fields(self.unseal(sealed_pal_priv), required=("nonce", "pal_priv"))
        if not hmac.compare_digest(f["nonce"], nonce):
            raise ReplayError("nonce does not match the sealed PAL key")
        return PrivateKey.decode(f["pal_priv"])

    def pm_key(self, sealed_pm_pub: bytes) -> PublicKey:
        return PublicKey.decode(self.unseal(sealed_pm_pub))

    def extract(self, enc_data: bytes, sealed_pal_priv: bytes, nonce: bytes, schema) -> dict[str, bytes]:
        key = self.pal_key(sealed_pal_priv, nonce)
        return unpack_fields(decrypt(key, enc_data), required=schema[0], optional=schema[1])


def block_initial_sealing(s: _Session, pm_pub: bytes) -> dict[str, bytes]:
    PublicKey.decode(pm_pub)
    expected = extend_value(ZERO_DIGEST, digest(pm_pub))
    if not hmac.compare_digest(expected, s.tpm.pcr_read(PROXY_KEY_PCR)):
        raise KeyProvenanceError("PCR15 does not vouch for this proxy key")
    return {"sealed_pm_pub": s.seal(pm_pub)}


def block_secure_tunnel(s: _Session) -> dict[str, bytes]:
    kp = generate_keypair(s.rng, KeyPurpose.PAL)
    nonce = s.rng.nonce()
    sealed = s.seal(pack_fields({"nonce": nonce, "pal_priv": kp.private.encode()}))
    s.tpm.extend(DRTM_PCR, binding_digest(kp.public, nonce), "binding")
    return {"nonce": bytes(nonce), "pal_pub": kp.public.encode(), "sealed_pal_priv": sealed}


def block_data_extraction(
    s: _Session, enc_data: bytes, sealed_pal_priv: bytes, nonce: bytes,
    sealed_pm_pub: bytes, nonce_prime: bytes,
) -> dict[str, bytes]:
    # Standalone extraction: the data leaves re-encrypted for the proxy module.
    pm_pub = s.pm_key(sealed_pm_pub)
    key = s.pal_key(sealed_pal_priv, nonce)
    data = bytearray(decrypt(key, enc_data))
    try:
        out = encrypt(pm_pub, pack_fields({"data": bytes(data), "nonce_prime": nonce_prime}), s.rng)
    finally:
        wipe(data)
    return {"enc_data_with_pm": out}


def block_registration(
    s: _Session, enc_data: bytes, sealed_pal_priv: bytes, nonce: bytes,
    sealed_pass_list: bytes | None = None,
) -> dict[str, bytes]:
    data = s.extract(enc_data, sealed_pal_priv, nonce, REGISTRATION_DATA)
    plist = PassList.decode(s.unseal(sealed_pass_list)) if sealed_pass_list else PassList()
    count = otp.DEFAULT_COUNT
    if "otp_count" in data:
        count, end = read_u32(data["otp_count"], 0)
        if end != len(data["otp_count"]) or count < 1:
            raise EncodingError("bad otp_count")
    user_id = text(data["user_id"])
    if not user_id:
        raise EncodingError("empty user id")
    params = otp.OtpParams(seed=s.rng.bytes(8).hex(), count=count)
    chain = otp.new_chain(text(data["secret_phrase"]), params)
    salt = s.rng.bytes(SALT_SIZE)
    entry = PassEntry(
        user_id=user_id,
        salt=salt,
        master_hash=hash_master(text(data["master_password"]), salt),
        otp_head=chain.head,
        otp_remaining=chain.remaining,
        otp_params=params,
    )
    plist = plist.upsert(entry)
    return {
        "otp_params": params.to_line().encode(),
        "sealed_pass_list": s.seal(plist.encode()),
        "user_id": user_id.encode(),
    }


def _check_password(plist: PassList, user_id: str, password: str, kind: str) -> tuple[bool, PassList | None]:
    entry = plist.get(user_id)
    if kind == "master":
        salt = entry.salt if entry else _DUMMY_SALT
        candidate = hash_master(password, salt)
        stored = entry.master_hash if entry else bytes(len(candidate))
        return hmac.compare_digest(candidate, stored) and entry is not None, None
    if kind == "otp":
        try:
            value = otp.parse_password(password)
        except EncodingError:
            return False, None
        if entry is None or entry.otp_remaining <= 0:
            return False, None
        ok, chain = otp.verify_and_advance(entry.chain, value)
        if not ok:
            return False, None
        updated = PassEntry(
            entry.user_id, entry.salt, entry.master_hash, chain.head, chain.remaining, entry.otp_params
        )
        return True, plist.upsert(updated)
    raise EncodingError(f"unknown password kind {kind!r}")


def block_authentication(
    s: _Session, enc_data: bytes, sealed_pal_priv: bytes, nonce: bytes, sealed_pass_list: bytes,
) -> dict[str, bytes]:
    data = s.extract(enc_data, sealed_pal_priv, nonce, AUTHENTICATION_DATA)
    plist = PassList.decode(s.unseal(sealed_pass_list))
    user_id = text(data["user_id"])
    ok, updated = _check_password(plist, user_id, text(data["password"]), text(data["kind"]))
    out = {"user_id": user_id.encode()}
    if updated is not None:
        # reseal while PCR18 still holds the base chain
        out["sealed_pass_list"] = s.seal(updated.encode())
    verdict = VERDICT_PASS if ok else VERDICT_FAIL
    s.tpm.extend(DRTM_PCR, digest(verdict), "verdict")
    out["verdict"] = verdict
    return out


def block_credential_decryption(
    s: _Session, enc_cred_with_pal: bytes, sealed_pal_priv: bytes, nonce: bytes,
    sealed_pm_pub: bytes, nonce_prime: bytes,
) -> dict[str, bytes]:
    pm_pub = s.pm_key(sealed_pm_pub)
    key = s.pal_key(sealed_pal_priv, nonce)
    creds = bytearray(decrypt(key, enc_cred_with_pal))
    try:
        out = encrypt(pm_pub, pack_fields({"credentials": bytes(creds), "nonce_prime": nonce_prime}), s.rng)
    finally:
        wipe(creds)
    return {"enc_cred_with_pm": out}


_BLOCKS = {
    Option.INITIAL_SEALING: block_initial_sealing,
    Option.SECURE_TUNNEL: block_secure_tunnel,
    Option.DATA_EXTRACTION: block_data_extraction,
    Option.REGISTRATION: block_registration,
    Option.AUTHENTICATION: block_authentication,
    Option.CREDENTIAL_DECRYPTION: block_credential_decryption,
}


def phase_one(tpm: Tpm, images: ModuleImages) -> bytes:
    tpm.extend(DRTM_PCR, digest(images.flicker), "flicker")
    return tpm.extend(DRTM_PCR, digest(images.proxy), "proxy")


def decode_input(data: bytes) -> tuple[Option, dict[str, bytes]]:
    env = PalEnvelope.decode(data)
    try:
        option = Option(env.option)
    except ValueError:
        raise EnvelopeError(f"unknown option {env.option!r}", code="unknown_option") from None
    required, optional = INPUT_SCHEMAS[option]
    payload = dict(env.payload)
    missing = set(required) - payload.keys()
    unknown = payload.keys() - set(required) - set(optional)
    if missing or unknown:
        raise EnvelopeError(f"schema violation: missing={sorted(missing)} unknown={sorted(unknown)}")
    return option, payload


def run_pal(tpm: Tpm, images: ModuleImages, envelope: bytes, rng: Rng) -> bytes:
    """Execute one PAL session. Requires an open DRTM session."""
    phase_one(tpm, images)
    option_name = "unknown"
    try:
        option, payload = decode_input(envelope)
        option_name = option.value
        out = _BLOCKS[option](_Session(tpm, rng), **payload)
    except TimError as exc:
        return error_envelope(option_name, exc.code, exc.detail or str(exc)).encode()
    except ValueError as exc:
        return error_envelope(option_name, "malformed", str(exc)).encode()
    out["status"] = b"ok"
    return PalEnvelope(option_name, out).encode()


def request(option: Option, **payload: bytes) -> bytes:
    """Build an input envelope."""
    return PalEnvelope(Option(option).value, payload).encode()
