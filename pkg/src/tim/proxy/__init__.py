"""Proxy module: trusted boot, Flicker invocation, credential database and protocols."""

from .boot import BootManifest, BootReport, trusted_boot
from .config import ProxyConfig
from .database import CredentialRecord, Database
from .flicker import Flicker, Invocation
from .forms import FormSchema, PageKind
from .module import ProxyModule
from .session import SessionState, SessionTable

__all__ = [
    "BootManifest",
    "BootReport",
    "CredentialRecord",
    "Database",
    "Flicker",
    "FormSchema",
    "Invocation",
    "PageKind",
    "ProxyConfig",
    "ProxyModule",
    "SessionState",
    "SessionTable",
    "trusted_boot",
]
