"""Software TPM 1.2 subset: PCR bank, extend, DRTM launch, seal/unseal, quote.

Only the functions the proxy needs are emulated. There is no command byte
stream, no locality model and no key hierarchy beyond one storage root key
(SRK) for sealing and one AIK for quoting.

Extend rule (``extend_value``)::

    new = H(measurement || old)

This is the order under which a DRTM launch of PAL followed by the PAL's
own extends of Flicker and PM yields::

    PCR18 = H(H(PM) || H(H(Flicker) || H(H(PAL) || 0^20)))

The rule lives in exactly one function; the measurement log replay, the
PAL's PCR15 provenance check and the quote verifier all call it.

Emulation boundary: ``drtm_launch`` cannot hand control to the measured
image the way SKINIT/SENTER does, so any caller may follow it with
arbitrary operations. ``drtm_close`` caps PCR18 so nothing running after
the session can unseal data bound to the in-session chain.
"""

from __future__ import annotations

import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .crypto import (
    DIGEST_SIZE,
    ZERO_DIGEST,
    KEY_BITS,
    Certificate,
    CertificateAuthority,
    Digest,
    KeyPair,
    KeyPurpose,
    Nonce,
    PrivateKey,
    PublicKey,
    Rng,
    digest,
    generate_keypair,
    sign,
    verify,
)
from .encoding import pack_fields, pack_list, text, unpack_fields, unpack_list
from .errors import DrtmError, EncodingError, IntegrityError, SealViolation, UnknownBlob

PCR_COUNT = 24
PROXY_KEY_PCR = 15
DRTM_PCR = 18

# Extended into PCR18 when a DRTM session closes (Flicker's cap convention).
DRTM_EXIT = digest(b"tim/drtm-exit")

_SNAPSHOT_MAGIC = b"TIMTPM"
_SNAPSHOT_VERSION = 1
_QUOTE_TAG = b"QUOT"
_SEAL_TAG = b"tim/seal/v1"

HashFn = Callable[[bytes], bytes]


def extend_value(old: bytes, measurement: bytes, hash: HashFn = digest) -> bytes:
    return hash(measurement + old)


def check_index(index: int, count: int = PCR_COUNT) -> int:
    if not isinstance(index, int) or not 0 <= index < count:
        raise ValueError(f"PCR index out of range: {index!r}")
    return index


class PcrBank:
    """Fixed array of registers mutable only through ``extend`` and ``_reset``.

    ``size`` and ``hash`` are injectable so tests can run the same bank
    with a tiny digest and enumerate every reachable state.
    """

    def __init__(self, count: int = PCR_COUNT, size: int = DIGEST_SIZE, hash: HashFn = digest):
        self.count = count
        self.size = size
        self.hash = hash
        self._regs: tuple[bytes, ...] = (bytes(size),) * count

    @property
    def registers(self) -> tuple[bytes, ...]:
        return self._regs

    def read(self, index: int) -> bytes:
        return self._regs[check_index(index, self.count)]

    def extend(self, index: int, measurement: bytes) -> bytes:
        check_index(index, self.count)
        if len(measurement) != self.size:
            raise ValueError(f"measurement must be {self.size} bytes")
        new = bytes(extend_value(self._regs[index], bytes(measurement), self.hash))
        self._regs = self._regs[:index] + (new,) + self._regs[index + 1:]
        return new

    def _reset(self, index: int) -> None:
        check_index(index, self.count)
        self._regs = self._regs[:index] + (bytes(self.size),) + self._regs[index + 1:]


@dataclass(frozen=True)
class LogEntry:
    label: str
    digest: bytes


@dataclass(frozen=True)
class MeasurementLog:
    """Ordered (label, digest) entries; replay must reproduce the PCR."""

    entries: tuple[LogEntry, ...] = ()

    def append(self, label: str, measurement: bytes) -> MeasurementLog:
        return MeasurementLog(self.entries + (LogEntry(label, bytes(measurement)),))

    def replay(self, start: bytes = ZERO_DIGEST, hash: HashFn = digest) -> bytes:
        value = start
        for entry in self.entries:
            value = extend_value(value, entry.digest, hash)
        return value

    def digests(self) -> list[bytes]:
        return [e.digest for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def encode(self) -> bytes:
        return pack_list(
            pack_fields({"digest": e.digest, "label": e.label.encode()}) for e in self.entries
        )

    @classmethod
    def decode(cls, data: bytes) -> MeasurementLog:
        entries = []
        for item in unpack_list(data):
            f = unpack_fields(item, required=("digest", "label"))
            entries.append(LogEntry(text(f["label"]), f["digest"]))
        return cls(tuple(entries))


@dataclass(frozen=True)
class SealedBlob:
    ciphertext: bytes
    pcr_index: int
    pcr_value_at_seal: bytes
    seal_id: Nonce
    srk_id: bytes

    def header(self) -> bytes:
        return _SEAL_TAG + pack_fields({
            "pcr_index": bytes([self.pcr_index]),
            "pcr_value": self.pcr_value_at_seal,
            "seal_id": self.seal_id,
            "srk_id": self.srk_id,
        })

    def encode(self) -> bytes:
        return pack_fields({
            "ciphertext": self.ciphertext,
            "pcr_index": bytes([self.pcr_index]),
            "pcr_value": self.pcr_value_at_seal,
            "seal_id": self.seal_id,
            "srk_id": self.srk_id,
        })

    @classmethod
    def decode(cls, data: bytes) -> SealedBlob:
        f = unpack_fields(data, required=("ciphertext", "pcr_index", "pcr_value", "seal_id", "srk_id"))
        if len(f["pcr_index"]) != 1:
            raise EncodingError("bad pcr_index")
        try:
            seal_id = Nonce(f["seal_id"])
        except ValueError as exc:
            raise EncodingError(str(exc)) from None
        return cls(f["ciphertext"], f["pcr_index"][0], f["pcr_value"], seal_id, f["srk_id"])


@dataclass(frozen=True)
class Quote:
    pcr_index: int
    pcr_value: bytes
    nonce: Nonce
    signature: bytes
    aik_cert: Certificate

    def message(self) -> bytes:
        return quote_message(self.pcr_index, self.pcr_value, self.nonce)

    def encode(self) -> bytes:
        return pack_fields({
            "aik_cert": self.aik_cert.encode(),
            "nonce": self.nonce,
            "pcr_index": bytes([self.pcr_index]),
            "pcr_value": self.pcr_value,
            "signature": self.signature,
        })

    @classmethod
    def decode(cls, data: bytes) -> Quote:
        f = unpack_fields(data, required=("aik_cert", "nonce", "pcr_index", "pcr_value", "signature"))
        if len(f["pcr_index"]) != 1:
            raise EncodingError("bad pcr_index")
        try:
            nonce = Nonce(f["nonce"])
        except ValueError as exc:
            raise EncodingError(str(exc)) from None
        return cls(f["pcr_index"][0], f["pcr_value"], nonce, f["signature"], Certificate.decode(f["aik_cert"]))


def quote_message(pcr_index: int, pcr_value: bytes, nonce: bytes) -> bytes:
    return _QUOTE_TAG + pack_fields({
        "nonce": bytes(nonce),
        "pcr_index": bytes([pcr_index]),
        "pcr_value": bytes(pcr_value),
    })


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = "ok"

    def __bool__(self):
        return self.ok


def verify_quote(
    q: Quote,
    expected_nonce: bytes,
    log: MeasurementLog,
    ca_pub: PublicKey,
    pcr_index: int | None = None,
) -> Verdict:
    """Verifier side of attestation. Never touches a live PCR bank."""
    if not q.aik_cert.verify(ca_pub):
        return Verdict(False, "bad_aik_cert")
    if not verify(q.aik_cert.public_key, q.message(), q.signature):
        return Verdict(False, "bad_signature")
    if bytes(q.nonce) != bytes(expected_nonce):
        return Verdict(False, "nonce_mismatch")
    if pcr_index is not None and q.pcr_index != pcr_index:
        return Verdict(False, "wrong_pcr")
    if log.replay() != q.pcr_value:
        return Verdict(False, "log_mismatch")
    return Verdict(True)


PcrObserver = Callable[[int, str, bytes, bytes], None]


class Tpm:
    """One emulated TPM. All public methods hold a single re-entrant lock."""

    def __init__(
        self,
        rng: Rng,
        ca: CertificateAuthority | None = None,
        *,
        name: str = "tpm",
        bank: PcrBank | None = None,
        key_bits: int = KEY_BITS,
        _keys: tuple[bytes, KeyPair, KeyPair, Certificate] | None = None,
    ):
        self.name = name
        self._rng = rng
        self._lock = threading.RLock()
        self.bank = bank or PcrBank()
        self._logs = [MeasurementLog() for _ in range(self.bank.count)]
        self._drtm_open = False
        self._observers: list[PcrObserver] = []
        if _keys is not None:
            self._srk, self.ek, self.aik, self.aik_cert = _keys
        else:
            if ca is None:
                raise ValueError("a CA is required to certify the AIK")
            self._srk = rng.bytes(32)
            self.ek = generate_keypair(rng, KeyPurpose.EK, key_bits)
            self.aik = generate_keypair(rng, KeyPurpose.AIK, key_bits)
            self.aik_cert = ca.issue(f"aik:{name}", self.aik.public)

    def __repr__(self):
        return f"Tpm(name={self.name!r}, srk_id={self.srk_id.hex()[:12]})"

    @property
    def srk_id(self) -> bytes:
        return digest(b"tim/srk-id" + self._srk)

    def subscribe(self, observer: PcrObserver) -> None:
        self._observers.append(observer)

    def _notify(self, index: int, label: str, measurement: bytes, value: bytes) -> None:
        for fn in list(self._observers):
            fn(index, label, measurement, value)

    # PCRs

    def pcr_read(self, index: int) -> bytes:
        with self._lock:
            return self.bank.read(index)

    def log(self, index: int) -> MeasurementLog:
        with self._lock:
            check_index(index, self.bank.count)
            return self._logs[index]

    def extend(self, index: int, measurement: bytes, label: str = "") -> bytes:
        with self._lock:
            value = self.bank.extend(index, measurement)
            self._logs[index] = self._logs[index].append(label, measurement)
            self._notify(index, label, bytes(measurement), value)
            return value

    @property
    def drtm_active(self) -> bool:
        return self._drtm_open

    def drtm_launch(self, pal_image: bytes, label: str = "pal") -> bytes:
        with self._lock:
            if self._drtm_open:
                raise DrtmError("a DRTM session is already open")
            self._drtm_open = True
            self.bank._reset(DRTM_PCR)
            self._logs[DRTM_PCR] = MeasurementLog()
            self._notify(DRTM_PCR, "drtm-reset", b"", self.bank.read(DRTM_PCR))
            return self.extend(DRTM_PCR, self.bank.hash(pal_image), label)

    def drtm_close(self) -> bytes:
        with self._lock:
            if not self._drtm_open:
                raise DrtmError("no DRTM session is open")
            cap = DRTM_EXIT if self.bank.size == DIGEST_SIZE else self.bank.hash(b"tim/drtm-exit")
            value = self.extend(DRTM_PCR, cap, "drtm-exit")
            self._drtm_open = False
            return value

    def reset(self) -> None:
        """Platform reboot: every PCR back to zero, logs cleared."""
        with self._lock:
            for i in range(self.bank.count):
                self.bank._reset(i)
            self._logs = [MeasurementLog() for _ in range(self.bank.count)]
            self._drtm_open = False

    # sealing

    def _seal_nonce(self, seal_id: bytes) -> bytes:
        return digest(b"tim/seal-nonce" + seal_id)[:12]

    def seal(self, plaintext: bytes, pcr_index: int) -> SealedBlob:
        with self._lock:
            value = self.bank.read(pcr_index)
            shell = SealedBlob(b"", pcr_index, value, self._rng.nonce(), self.srk_id)
            ct = AESGCM(self._srk).encrypt(self._seal_nonce(shell.seal_id), bytes(plaintext), shell.header())
            return SealedBlob(ct, pcr_index, value, shell.seal_id, self.srk_id)

    def unseal(self, blob: SealedBlob) -> bytes:
        with self._lock:
            if blob.srk_id != self.srk_id:
                raise UnknownBlob("blob was sealed by a different TPM")
            check_index(blob.pcr_index, self.bank.count)
            try:
                plaintext = AESGCM(self._srk).decrypt(
                    self._seal_nonce(blob.seal_id), blob.ciphertext, blob.header()
                )
            except InvalidTag:
                raise IntegrityError("sealed blob failed authentication") from None
            if self.bank.read(blob.pcr_index) != blob.pcr_value_at_seal:
                raise SealViolation(f"PCR{blob.pcr_index} differs from the sealed snapshot")
            return plaintext

    # attestation

    def quote(self, pcr_index: int, nonce: bytes) -> Quote:
        with self._lock:
            value = self.bank.read(pcr_index)
            nonce = Nonce(bytes(nonce))
            sig = sign(self.aik.private, quote_message(pcr_index, value, nonce))
            return Quote(pcr_index, value, nonce, sig, self.aik_cert)

    # persistence

    def snapshot(self) -> bytes:
        """Versioned binary checkpoint of keys, PCRs and logs."""
        with self._lock:
            if self.bank.size != DIGEST_SIZE:
                raise ValueError("only full-width banks can be snapshotted")
            body = pack_fields({
                "aik": self.aik.private.encode(),
                "aik_cert": self.aik_cert.encode(),
                "drtm_open": b"\x01" if self._drtm_open else b"\x00",
                "ek": self.ek.private.encode(),
                "logs": pack_list(log.encode() for log in self._logs),
                "name": self.name.encode(),
                "pcrs": b"".join(self.bank.registers),
                "srk": self._srk,
            })
            return _SNAPSHOT_MAGIC + struct.pack(">H", _SNAPSHOT_VERSION) + body

    @classmethod
    def restore(cls, data: bytes, rng: Rng) -> Tpm:
        if not data.startswith(_SNAPSHOT_MAGIC) or len(data) < len(_SNAPSHOT_MAGIC) + 2:
            raise EncodingError("not a TPM snapshot")
        (version,) = struct.unpack_from(">H", data, len(_SNAPSHOT_MAGIC))
        if version != _SNAPSHOT_VERSION:
            raise EncodingError(f"unsupported snapshot version {version}")
        f = unpack_fields(
            data[len(_SNAPSHOT_MAGIC) + 2:],
            required=("aik", "aik_cert", "drtm_open", "ek", "logs", "name", "pcrs", "srk"),
        )
        aik_priv = PrivateKey.decode(f["aik"])
        ek_priv = PrivateKey.decode(f["ek"])
        keys = (
            f["srk"],
            KeyPair(ek_priv.public, ek_priv, KeyPurpose.EK),
            KeyPair(aik_priv.public, aik_priv, KeyPurpose.AIK),
            Certificate.decode(f["aik_cert"]),
        )
        tpm = cls(rng, name=text(f["name"]), _keys=keys)
        pcrs = f["pcrs"]
        if len(pcrs) != PCR_COUNT * DIGEST_SIZE:
            raise EncodingError("bad PCR block")
        tpm.bank._regs = tuple(
            Digest(pcrs[i * DIGEST_SIZE:(i + 1) * DIGEST_SIZE]) for i in range(PCR_COUNT)
        )
        logs = unpack_list(f["logs"])
        if len(logs) != PCR_COUNT:
            raise EncodingError("bad log block")
        tpm._logs = [MeasurementLog.decode(item) for item in logs]
        tpm._drtm_open = f["drtm_open"] == b"\x01"
        return tpm


@dataclass
class PcrHistory:
    """Observer that records every PCR change, for transcripts and tests."""

    events: list[tuple[int, str, bytes, bytes]] = field(default_factory=list)

    def __call__(self, index: int, label: str, measurement: bytes, value: bytes) -> None:
        self.events.append((index, label, measurement, value))
