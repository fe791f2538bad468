"""Proxy configuration (INI).

::

    [proxy]
    listen = 127.0.0.1:7300
    db_path = tim.db
    manifest_path = manifest.txt
    session_idle_timeout = 1800
    otp_count = 100
"""

from __future__ import annotations

import configparser
from io import StringIO
from dataclasses import dataclass

from .session import DEFAULT_IDLE_TIMEOUT


@dataclass(frozen=True)
class ProxyConfig:
    listen: str = "127.0.0.1:7300"
    db_path: str | None = None
    manifest_path: str | None = None
    session_idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    otp_count: int = 100

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_ini(cls, data: str) -> ProxyConfig:
        cp = configparser.ConfigParser()
        cp.read_string(data)
        sec = cp["proxy"] if cp.has_section("proxy") else {}
        return cls(
            listen=sec.get("listen", cls.listen),
            db_path=sec.get("db_path") or None,
            manifest_path=sec.get("manifest_path") or None,
            session_idle_timeout=float(sec.get("session_idle_timeout", DEFAULT_IDLE_TIMEOUT)),
            otp_count=int(sec.get("otp_count", 100)),
        )

    @classmethod
    def load(cls, path: str) -> ProxyConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["proxy"] = {
            "listen": self.listen,
            "db_path": self.db_path or "",
            "manifest_path": self.manifest_path or "",
            "session_idle_timeout": str(self.session_idle_timeout),
            "otp_count": str(self.otp_count),
        }
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()
