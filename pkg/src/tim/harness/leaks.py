"""Scan transcripts and persisted files for plaintext secrets."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

from .transcript import Transcript


@dataclass(frozen=True)
class Finding:
    secret: str
    where: str
    offset: int


class SecretRegistry:
    """Labelled secrets that must never appear in observable bytes."""

    def __init__(self):
        self._secrets: dict[str, bytes] = {}

    def add(self, label: str, value: str | bytes) -> None:
        raw = value.encode() if isinstance(value, str) else bytes(value)
        if len(raw) < 6:
            raise ValueError(f"secret {label!r} too short to scan for reliably")
        self._secrets[label] = raw

    def items(self):
        return self._secrets.items()

    def __len__(self):
        return len(self._secrets)


def _scan(data: bytes, where: str, secrets: SecretRegistry) -> list[Finding]:
    found = []
    for label, raw in secrets.items():
        start = data.find(raw)
        while start != -1:
            found.append(Finding(label, where, start))
            start = data.find(raw, start + 1)
    return found


def leak_detector(transcript: Transcript, secrets: SecretRegistry,
                  files: Mapping[str, bytes] | None = None) -> list[Finding]:
    findings: list[Finding] = []
    for i, rec in enumerate(transcript.records):
        if rec.type in ("frame", "envelope"):
            findings += _scan(rec.fields["data"], f"{rec.type}[{i}]", secrets)
    for name, data in (files or {}).items():
        findings += _scan(data, f"file:{name}", secrets)
    return findings
