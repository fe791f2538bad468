"""Flicker-style PAL invocation.

One invocation is an exclusive critical section:

1. write the input envelope file;
2. DRTM launch with the PAL image read from the platform;
3. run the PAL, which reads the input file and writes the output file;
4. optionally quote PCR18 over a caller nonce, then close the session
   (the close caps PCR18);
5. read the output file back.

The quote is taken after the cap, so its log ends with the exit entry.
Taking it inside the same critical section keeps concurrent callers from
quoting each other's sessions.

Envelope files live in ``workdir`` when one is given, otherwise in the
``files`` dict. Hooks see and may rewrite file contents; the harness uses
them to play an attacker with write access to the files.
"""

from __future__ import annotations

import threading
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from ..artifacts import Platform
from ..crypto import Rng
from ..pal import ModuleImages, run_pal
from ..tpm import DRTM_PCR, MeasurementLog, Quote, Tpm

INPUT_FILE = "pal_input.bin"
OUTPUT_FILE = "pal_output.bin"

FileHook = Callable[[bytes], bytes]


@dataclass(frozen=True)
class Invocation:
    input: bytes
    output: bytes
    quote: Quote | None
    log: MeasurementLog


class Flicker:
    def __init__(self, tpm: Tpm, platform: Platform, rng: Rng, workdir: str | Path | None = None):
        self.tpm = tpm
        self.platform = platform
        self._rng = rng
        self.workdir = Path(workdir) if workdir is not None else None
        self.files: dict[str, bytes] = {}
        self.input_hooks: list[FileHook] = []
        self.output_hooks: list[FileHook] = []
        self.observers: list[Callable[[str, bytes], None]] = []
        self._lock = threading.Lock()
        self.invocations = 0

    def _write(self, name: str, data: bytes, hooks: list[FileHook]) -> None:
        for hook in hooks:
            data = hook(data)
        self.files[name] = data
        if self.workdir is not None:
            (self.workdir / name).write_bytes(data)
        for fn in self.observers:
            fn(name, data)

    def _read(self, name: str) -> bytes:
        if self.workdir is not None:
            return (self.workdir / name).read_bytes()
        return self.files[name]

    def invoke(self, envelope: bytes, quote_nonce: bytes | None = None) -> Invocation:
        with self._lock:
            self.invocations += 1
            self._write(INPUT_FILE, envelope, self.input_hooks)
            self.tpm.drtm_launch(self.platform.read("pal"))
            try:
                images = ModuleImages(self.platform.read("flicker"), self.platform.read("proxy"))
                out = run_pal(self.tpm, images, self._read(INPUT_FILE), self._rng)
            finally:
                self.tpm.drtm_close()
            quote = self.tpm.quote(DRTM_PCR, quote_nonce) if quote_nonce is not None else None
            log = self.tpm.log(DRTM_PCR)
            self._write(OUTPUT_FILE, out, self.output_hooks)
            return Invocation(self.files[INPUT_FILE], self._read(OUTPUT_FILE), quote, log)
