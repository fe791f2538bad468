"""Exception hierarchy.

Every error carries a stable ``code`` string. Codes cross process and wire
boundaries (PAL error envelopes, proxy error frames), so they are part of
the protocol and must not be renamed casually.
"""

from __future__ import annotations


class TimError(Exception):
    code = "error"

    def __init__(self, detail: str = "", *, code: str | None = None):
        super().__init__(detail or self.__class__.__name__)
        self.detail = detail
        if code is not None:
            self.code = code


# crypto / sealing

class IntegrityError(TimError):
    """Ciphertext or sealed blob failed authentication."""
    code = "integrity"


class SealViolation(TimError):
    """Unseal attempted while the bound PCR holds a different value."""
    code = "seal_violation"


class UnknownBlob(TimError):
    """Sealed blob was produced by a different emulator instance."""
    code = "unknown_blob"


class DrtmError(TimError):
    code = "drtm_exclusive"


class KeyProvenanceError(TimError):
    """PCR15 does not vouch for the proxy public key offered for sealing."""
    code = "key_provenance"


class ReplayError(TimError):
    code = "replay"


# encoding / envelopes

class EncodingError(TimError):
    code = "malformed"


class EnvelopeError(TimError):
    code = "malformed"


# otp

class ChainExhausted(TimError):
    code = "otp_exhausted"


# proxy

class BootRefused(TimError):
    code = "boot_refused"

    def __init__(self, module: str, detail: str = ""):
        super().__init__(detail or f"measured digest of {module!r} differs from manifest")
        self.module = module


class PalError(TimError):
    """The PAL aborted and returned an error envelope."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code, code=code)


class AttestationError(TimError):
    code = "attestation"


class NotAuthenticated(TimError):
    code = "not_authenticated"


class CertificateError(TimError):
    code = "target_certificate"


class TargetRejected(TimError):
    code = "target_rejected"


class TargetUnavailable(TimError):
    code = "target_unavailable"


class CredentialAccessDenied(TimError):
    code = "credential_access_denied"


class ProtocolError(TimError):
    code = "protocol"


# client

class TunnelRefused(TimError):
    """Client refused to pin a PAL key. ``reason`` names the failed check."""
    code = "tunnel_refused"

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(detail or reason)
        self.reason = reason


class AuthenticationRefused(TimError):
    code = "auth_failed"


class PinError(TimError):
    code = "no_pinned_tunnel"


class RemoteError(TimError):
    """An error frame returned by a peer, re-raised on the receiving side."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code, code=code)


# harness

class ScenarioInvalid(TimError):
    code = "scenario_invalid"
