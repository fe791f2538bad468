"""S/Key-style one-time password chains over full-width SHA-1.

With ``x0 = H(phrase || seed)`` the chain has N passwords. Password ``i``
(1-based, in the order they are used) is ``H^(N-i)(x0)``. The verifier
starts from ``head = H^N(x0)`` and accepts a candidate ``p`` iff
``H(p) == head``, after which ``head = p``. Passwords are shown to users
as 40 lowercase hex characters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .crypto import DIGEST_SIZE, Digest, digest
from .errors import ChainExhausted, EncodingError

ALGORITHM_TAG = "otp/v1"
DEFAULT_COUNT = 100

_LINE = re.compile(r"^(?P<tag>[a-z0-9/]+);seed=(?P<seed>[^;\s]+);n=(?P<n>[1-9][0-9]*)$")
_HEX = re.compile(r"^[0-9a-f]{40}$")


@dataclass(frozen=True)
class OtpParams:
    seed: str
    count: int = DEFAULT_COUNT
    algorithm_tag: str = ALGORITHM_TAG

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("chain length must be at least 1")
        if not self.seed or ";" in self.seed or any(c.isspace() for c in self.seed):
            raise ValueError("seed must be non-empty printable text without ';'")
        if self.algorithm_tag != ALGORITHM_TAG:
            raise ValueError(f"unsupported OTP algorithm {self.algorithm_tag!r}")

    def to_line(self) -> str:
        return f"{self.algorithm_tag};seed={self.seed};n={self.count}"

    @classmethod
    def from_line(cls, line: str) -> OtpParams:
        m = _LINE.match(line.strip())
        if not m:
            raise EncodingError(f"not an OTP parameter line: {line!r}")
        try:
            return cls(seed=m["seed"], count=int(m["n"]), algorithm_tag=m["tag"])
        except ValueError as exc:
            raise EncodingError(str(exc)) from None


@dataclass(frozen=True)
class OtpChain:
    """Verifier state: the last accepted value and how many remain."""

    head: Digest
    remaining: int


def _start(secret_phrase: str, params: OtpParams) -> Digest:
    return digest(secret_phrase.encode() + params.seed.encode())


def _iterate(value: bytes, times: int) -> Digest:
    for _ in range(times):
        value = digest(value)
    return Digest(value)


def derive_chain(secret_phrase: str, params: OtpParams) -> list[Digest]:
    """All N passwords in the order they will be used."""
    value = _start(secret_phrase, params)
    backwards = [value]
    for _ in range(params.count - 1):
        value = digest(value)
        backwards.append(value)
    return backwards[::-1]


def password_at(secret_phrase: str, params: OtpParams, i: int) -> Digest:
    """Password ``i`` (1-based) without building the whole list."""
    if not 1 <= i <= params.count:
        raise ChainExhausted(f"password index {i} outside 1..{params.count}")
    return _iterate(_start(secret_phrase, params), params.count - i)


def new_chain(secret_phrase: str, params: OtpParams) -> OtpChain:
    return OtpChain(head=_iterate(_start(secret_phrase, params), params.count), remaining=params.count)


def verify_and_advance(chain: OtpChain, candidate: bytes) -> tuple[bool, OtpChain]:
    if chain.remaining <= 0:
        raise ChainExhausted("OTP chain exhausted")
    if len(candidate) != DIGEST_SIZE or digest(candidate) != chain.head:
        return False, chain
    return True, replace(chain, head=Digest(candidate), remaining=chain.remaining - 1)


def format_password(value: bytes) -> str:
    return bytes(value).hex()


def parse_password(textual: str) -> Digest:
    textual = textual.strip().lower()
    if not _HEX.match(textual):
        raise EncodingError("OTP must be 40 hex characters")
    return Digest(bytes.fromhex(textual))
