"""Authenticated proxy sessions and the per-session anti-replay state."""

from __future__ import annotations

import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from ..crypto import Nonce, PublicKey, Rng
from ..errors import NotAuthenticated, ReplayError
from .forms import FormSchema

DEFAULT_IDLE_TIMEOUT = 30 * 60.0


@dataclass
class PageContext:
    """A page handed to the client, redeemable once by its token."""

    site: str
    page: str
    schema: FormSchema
    site_pub: PublicKey
    conn_id: bytes
    server_nonce: bytes
    site_seq: int
    has_record: bool


@dataclass
class SessionState:
    session_id: str
    user_id: str
    tunnel_key: PublicKey
    sealed_pal_priv: bytes
    nonce: Nonce
    created_at: float
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    authenticated: bool = True
    last_seen: float = 0.0
    last_seq: int = 0
    pages: dict[str, PageContext] = field(default_factory=dict)


class SessionTable:
    def __init__(self, rng: Rng, clock: Callable[[], float], idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        self._rng = rng
        self._clock = clock
        self.idle_timeout = idle_timeout
        self._sessions: dict[str, SessionState] = {}
        self._lock = threading.Lock()

    def create(self, user_id: str, tunnel_key: PublicKey, sealed_pal_priv: bytes, nonce: Nonce) -> SessionState:
        now = self._clock()
        s = SessionState(
            session_id=self._rng.bytes(20).hex(),
            user_id=user_id,
            tunnel_key=tunnel_key,
            sealed_pal_priv=sealed_pal_priv,
            nonce=nonce,
            created_at=now,
            idle_timeout=self.idle_timeout,
            last_seen=now,
        )
        with self._lock:
            self._sessions[s.session_id] = s
        return s

    def require(self, session_id: str, seq: int) -> SessionState:
        """Look up an authenticated, live session and consume ``seq``."""
        now = self._clock()
        with self._lock:
            s = self._sessions.get(session_id)
            if s is None or not s.authenticated:
                raise NotAuthenticated("no authenticated session")
            if now - s.last_seen > s.idle_timeout:
                del self._sessions[session_id]
                raise NotAuthenticated("session expired")
            if seq <= s.last_seq:
                raise ReplayError(f"sequence {seq} already used")
            s.last_seq = seq
            s.last_seen = now
            return s

    def add_page(self, s: SessionState, ctx: PageContext) -> str:
        token = self._rng.bytes(16).hex()
        with self._lock:
            s.pages[token] = ctx
        return token

    def take_page(self, s: SessionState, token: str) -> PageContext:
        with self._lock:
            ctx = s.pages.pop(token, None)
        if ctx is None:
            raise ReplayError("unknown or already used page token")
        return ctx

    def end(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def __len__(self):
        return len(self._sessions)
