"""Cryptographic primitives shared by the TPM emulator, PAL, proxy and client.

Choices made here and nowhere else:

* Hash: SHA-1 (20-byte digests) to match TPM 1.2 PCR width. SHA-1 is
  broken for collision resistance; swap ``digest`` if that matters.
* Asymmetric keys: RSA-2048, e = 65537. Primes come from the injected
  ``Rng`` so a seeded run regenerates the same keys.
* Public-key encryption: hybrid RSA-KEM. A random integer ``z < n`` is
  encrypted raw (``z^e mod n``), HKDF-SHA256 turns ``z`` into an AES-256
  key, and the body is sealed with AES-GCM. Any corruption fails the GCM
  tag, so ``decrypt`` raises ``IntegrityError`` instead of returning junk.
* Signatures: RSASSA-PKCS1-v1_5 with SHA-256 (deterministic).

Canonical public-key encoding (hashed into ``key_id``)::

    b"RSA1" | u32 len(e) | e big-endian | u32 len(n) | n big-endian

Integers are minimal-length (no leading zero bytes).
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
import struct
import threading
from dataclasses import dataclass
from functools import cached_property

import gmpy2
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import pack_fields, pack_int, text, unpack_fields, unpack_ints
from .errors import EncodingError, IntegrityError

DIGEST_SIZE = 20
NONCE_SIZE = 20
KEY_BITS = 2048
PUBLIC_EXPONENT = 65537

_PUB_MAGIC = b"RSA1"
_PRIV_MAGIC = b"RSA1PRIV"
_KEM_INFO = b"tim/hybrid/v1"
_GCM_NONCE = 12
_GCM_TAG = 16


class Digest(bytes):
    """A 20-byte SHA-1 value."""

    def __new__(cls, value: bytes = bytes(DIGEST_SIZE)):
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"Digest({self.hex()})"


class Nonce(bytes):
    """A 20-byte random challenge."""

    def __new__(cls, value: bytes):
        if len(value) != NONCE_SIZE:
            raise ValueError(f"nonce must be {NONCE_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"Nonce({self.hex()})"


ZERO_DIGEST = Digest()


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha1(data).digest())


class Rng:
    """Seedable deterministic byte generator (SHA-256 in counter mode).

    ``fork(label)`` derives an independent child stream without consuming
    output from the parent, so adding draws in one component never shifts
    another component's stream.
    """

    def __init__(self, seed: bytes | int | str | None = None):
        if seed is None:
            seed = os.urandom(32)
        elif isinstance(seed, int):
            seed = seed.to_bytes(max(1, (seed.bit_length() + 8) // 8), "big", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        self._key = hashlib.sha256(b"tim/rng/seed" + seed).digest()
        self._counter = 0
        self._pool = b""
        self._lock = threading.Lock()

    def fork(self, label: str) -> Rng:
        child = Rng.__new__(Rng)
        child._key = hashlib.sha256(b"tim/rng/fork" + self._key + label.encode()).digest()
        child._counter = 0
        child._pool = b""
        child._lock = threading.Lock()
        return child

    def bytes(self, n: int) -> bytes:
        with self._lock:
            while len(self._pool) < n:
                block = hashlib.sha256(self._key + struct.pack(">Q", self._counter)).digest()
                self._counter += 1
                self._pool += block
            out, self._pool = self._pool[:n], self._pool[n:]
            return out

    def randbits(self, k: int) -> int:
        raw = int.from_bytes(self.bytes((k + 7) // 8), "big")
        return raw >> (8 * ((k + 7) // 8) - k)

    def randbelow(self, n: int) -> int:
        k = n.bit_length()
        while True:
            r = self.randbits(k)
            if r < n:
                return r

    def nonce(self) -> Nonce:
        return Nonce(self.bytes(NONCE_SIZE))


class KeyPurpose(str, enum.Enum):
    PAL = "pal"
    PROXY = "proxy"
    AIK = "aik"
    EK = "ek"
    CA = "ca"
    SITE = "site"


@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int = PUBLIC_EXPONENT

    def encode(self) -> bytes:
        return _PUB_MAGIC + pack_int(self.e) + pack_int(self.n)

    @classmethod
    def decode(cls, data: bytes) -> PublicKey:
        if not data.startswith(_PUB_MAGIC):
            raise EncodingError("not an RSA public key encoding")
        e, n = unpack_ints(data[len(_PUB_MAGIC):], 2)
        if n.bit_length() < 512 or e < 3:
            raise EncodingError("implausible RSA public key")
        return cls(n=n, e=e)

    @cached_property
    def key_id(self) -> Digest:
        return digest(self.encode())

    @property
    def size(self) -> int:
        return (self.n.bit_length() + 7) // 8

    @cached_property
    def _backend(self) -> rsa.RSAPublicKey:
        return rsa.RSAPublicNumbers(self.e, self.n).public_key()


@dataclass(frozen=True, repr=False)
class PrivateKey:
    p: int
    q: int
    e: int = PUBLIC_EXPONENT

    def __repr__(self):
        return f"PrivateKey(key_id={self.public.key_id.hex()})"

    @cached_property
    def public(self) -> PublicKey:
        return PublicKey(n=self.p * self.q, e=self.e)

    @cached_property
    def d(self) -> int:
        return pow(self.e, -1, math.lcm(self.p - 1, self.q - 1))

    def encode(self) -> bytes:
        return _PRIV_MAGIC + pack_int(self.e) + pack_int(self.p) + pack_int(self.q)

    @classmethod
    def decode(cls, data: bytes) -> PrivateKey:
        if not data.startswith(_PRIV_MAGIC):
            raise EncodingError("not an RSA private key encoding")
        e, p, q = unpack_ints(data[len(_PRIV_MAGIC):], 3)
        return cls(p=p, q=q, e=e)

    @cached_property
    def _crt(self) -> tuple[int, int, int]:
        d = self.d
        return d % (self.p - 1), d % (self.q - 1), pow(self.q, -1, self.p)

    def _raw_decrypt(self, c: int) -> int:
        dp, dq, qinv = self._crt
        m1 = int(gmpy2.powmod(c, dp, self.p))
        m2 = int(gmpy2.powmod(c, dq, self.q))
        h = (qinv * (m1 - m2)) % self.p
        return m2 + h * self.q

    @cached_property
    def _backend(self) -> rsa.RSAPrivateKey:
        dp, dq, qinv = self._crt
        numbers = rsa.RSAPrivateNumbers(
            p=self.p,
            q=self.q,
            d=self.d,
            dmp1=dp,
            dmq1=dq,
            iqmp=qinv,
            public_numbers=rsa.RSAPublicNumbers(self.e, self.p * self.q),
        )
        return numbers.private_key(unsafe_skip_rsa_key_validation=True)


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey
    purpose: KeyPurpose

    @property
    def key_id(self) -> Digest:
        return self.public.key_id


def _random_prime(rng: Rng, bits: int) -> int:
    while True:
        start = rng.randbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(start))
        if p.bit_length() == bits and math.gcd(PUBLIC_EXPONENT, p - 1) == 1:
            return p


def generate_keypair(rng: Rng, purpose: KeyPurpose | str, bits: int = KEY_BITS) -> KeyPair:
    purpose = KeyPurpose(purpose)
    half = bits // 2
    p = _random_prime(rng, half)
    q = _random_prime(rng, half)
    while q == p:
        q = _random_prime(rng, half)
    private = PrivateKey(p=max(p, q), q=min(p, q))
    return KeyPair(public=private.public, private=private, purpose=purpose)


def _kem_key(z: int, size: int) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=_KEM_INFO
    ).derive(z.to_bytes(size, "big"))


def encrypt(public: PublicKey, plaintext: bytes, rng: Rng) -> bytes:
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    size = public.size
    z = rng.randbelow(public.n)
    header = int(gmpy2.powmod(z, public.e, public.n)).to_bytes(size, "big")
    nonce = rng.bytes(_GCM_NONCE)
    body = AESGCM(_kem_key(z, size)).encrypt(nonce, bytes(plaintext), _KEM_INFO + header)
    return header + nonce + body


def decrypt(private: PrivateKey, ciphertext: bytes) -> bytes:
    size = private.public.size
    if len(ciphertext) < size + _GCM_NONCE + _GCM_TAG:
        raise IntegrityError("ciphertext too short")
    header = ciphertext[:size]
    c = int.from_bytes(header, "big")
    if c >= private.public.n:
        raise IntegrityError("ciphertext header out of range")
    z = private._raw_decrypt(c)
    nonce = ciphertext[size:size + _GCM_NONCE]
    try:
        return AESGCM(_kem_key(z, size)).decrypt(
            nonce, ciphertext[size + _GCM_NONCE:], _KEM_INFO + header
        )
    except InvalidTag:
        raise IntegrityError("ciphertext failed authentication") from None


def sign(private: PrivateKey, message: bytes) -> bytes:
    return private._backend.sign(message, padding.PKCS1v15(), hashes.SHA256())


def verify(public: PublicKey, message: bytes, signature: bytes) -> bool:
    try:
        public._backend.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
    except InvalidSignature:
        return False
    return True


def wipe(buffer: bytearray) -> None:
    """Best-effort overwrite of a transient plaintext buffer."""
    for i in range(len(buffer)):
        buffer[i] = 0


@dataclass(frozen=True)
class Certificate:
    """A public key bound to a subject name by one CA signature."""

    subject: str
    issuer: str
    public_key: PublicKey
    signature: bytes

    def tbs(self) -> bytes:
        return pack_fields({
            "issuer": self.issuer.encode(),
            "public_key": self.public_key.encode(),
            "subject": self.subject.encode(),
        })

    def verify(self, ca_public: PublicKey) -> bool:
        return verify(ca_public, self.tbs(), self.signature)

    def encode(self) -> bytes:
        return pack_fields({
            "issuer": self.issuer.encode(),
            "public_key": self.public_key.encode(),
            "signature": self.signature,
            "subject": self.subject.encode(),
        })

    @classmethod
    def decode(cls, data: bytes) -> Certificate:
        f = unpack_fields(data, required=("issuer", "public_key", "signature", "subject"))
        return cls(
            subject=text(f["subject"]),
            issuer=text(f["issuer"]),
            public_key=PublicKey.decode(f["public_key"]),
            signature=f["signature"],
        )


class CertificateAuthority:
    """Single-level CA used for AIK certificates and target-site certificates."""

    def __init__(self, rng: Rng, name: str = "harness-ca", bits: int = KEY_BITS):
        self.name = name
        self.keypair = generate_keypair(rng, KeyPurpose.CA, bits)

    @property
    def public_key(self) -> PublicKey:
        return self.keypair.public

    def issue(self, subject: str, public_key: PublicKey) -> Certificate:
        unsigned = Certificate(subject, self.name, public_key, b"")
        return Certificate(subject, self.name, public_key, sign(self.keypair.private, unsigned.tbs()))
