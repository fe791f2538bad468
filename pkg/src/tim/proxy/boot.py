"""Trusted boot: refuse to start when a measured module differs from the manifest.

Manifest text format, one module per line::

    <module_name> <40 hex digest>
"""

from __future__ import annotations

from dataclasses import dataclass

from ..artifacts import Platform, ReferenceMeasurements
from ..crypto import Digest, digest
from ..errors import BootRefused, EncodingError

BOOT_MODULES = ("proxy", "flicker")


@dataclass(frozen=True)
class BootManifest:
    entries: tuple[tuple[str, Digest], ...]

    @classmethod
    def from_reference(cls, ref: ReferenceMeasurements) -> BootManifest:
        return cls((("proxy", ref.proxy), ("flicker", ref.flicker)))

    def to_text(self) -> str:
        return "".join(f"{name} {value.hex()}\n" for name, value in self.entries)

    @classmethod
    def from_text(cls, data: str) -> BootManifest:
        entries = []
        for line in data.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise EncodingError(f"bad manifest line: {line!r}")
            try:
                entries.append((parts[0], Digest(bytes.fromhex(parts[1]))))
            except ValueError as exc:
                raise EncodingError(f"bad manifest digest: {exc}") from None
        return cls(tuple(entries))


@dataclass(frozen=True)
class BootReport:
    expected: tuple[tuple[str, Digest], ...]
    measured: tuple[tuple[str, Digest], ...]

    @property
    def ok(self) -> bool:
        return self.expected == self.measured


def trusted_boot(manifest: BootManifest, platform: Platform) -> BootReport:
    measured = tuple((name, digest(platform.read(name))) for name, _ in manifest.entries)
    for (name, want), (_, got) in zip(manifest.entries, measured):
        if want != got:
            raise BootRefused(name)
    return BootReport(manifest.entries, measured)
