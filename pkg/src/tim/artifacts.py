"""Release artifacts and the live on-disk images of a proxy platform.

The measured images are the real source bytes of this package:

* ``pal``: ``tim/pal.py``
* ``flicker``: ``tim/proxy/flicker.py``
* ``proxy``: every other ``tim/proxy/*.py`` file, packed as a sorted list
  of ``{path, code}`` field maps.

``release_images()`` returns the pristine bytes; a ``Platform`` holds a
mutable copy that attack scenarios may tamper with. ``ReferenceMeasurements``
are the digests published with a release; clients and the boot manifest
are built from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .crypto import ZERO_DIGEST, Digest, digest
from .encoding import pack_fields, pack_list, unpack_fields
from .tpm import DRTM_EXIT, MeasurementLog, extend_value

MODULES = ("pal", "flicker", "proxy")


def _read(*parts: str) -> bytes:
    return resources.files("tim").joinpath(*parts).read_bytes()


@lru_cache(maxsize=1)
def release_images() -> dict[str, bytes]:
    proxy_dir = resources.files("tim").joinpath("proxy")
    proxy_files = sorted(
        p.name for p in proxy_dir.iterdir() if p.name.endswith(".py") and p.name != "flicker.py"
    )
    proxy = pack_list(
        pack_fields({"code": _read("proxy", name), "path": f"proxy/{name}".encode()})
        for name in proxy_files
    )
    return {"pal": _read("pal.py"), "flicker": _read("proxy", "flicker.py"), "proxy": proxy}


@dataclass(frozen=True)
class ReferenceMeasurements:
    pal: Digest
    flicker: Digest
    proxy: Digest

    @classmethod
    def of(cls, images: dict[str, bytes]) -> ReferenceMeasurements:
        return cls(*(digest(images[m]) for m in MODULES))

    @classmethod
    def release(cls) -> ReferenceMeasurements:
        return cls.of(release_images())

    def base_log(self) -> MeasurementLog:
        return (
            MeasurementLog()
            .append("pal", self.pal)
            .append("flicker", self.flicker)
            .append("proxy", self.proxy)
        )

    def base_chain(self) -> bytes:
        return self.base_log().replay()

    def expected_log(self, output_digest: bytes) -> MeasurementLog:
        """Log of a session whose block extended ``output_digest`` once."""
        return self.base_log().append("output", output_digest).append("drtm-exit", DRTM_EXIT)

    def encode(self) -> bytes:
        return pack_fields({"flicker": self.flicker, "pal": self.pal, "proxy": self.proxy})

    @classmethod
    def decode(cls, data: bytes) -> ReferenceMeasurements:
        f = unpack_fields(data, required=MODULES)
        return cls(Digest(f["pal"]), Digest(f["flicker"]), Digest(f["proxy"]))


def chain_value(*measurements: bytes) -> bytes:
    value = ZERO_DIGEST
    for m in measurements:
        value = extend_value(value, m)
    return value


@dataclass
class Platform:
    """The proxy host's file system view of the three images."""

    images: dict[str, bytes] = field(default_factory=lambda: dict(release_images()))

    def read(self, module: str) -> bytes:
        return self.images[module]

    def tamper(self, module: str, patch: bytes = b"\n# patched\n") -> None:
        if module not in MODULES:
            raise KeyError(module)
        self.images[module] = self.images[module] + patch

    def restore(self, module: str) -> None:
        self.images[module] = release_images()[module]
