"""A complete seeded deployment: CA, TPM, proxy, target sites, network, clients."""

from __future__ import annotations

from dataclasses import dataclass

from ..artifacts import Platform, ReferenceMeasurements
from ..client import Client, ClientProfile
from ..crypto import CertificateAuthority, Rng
from ..proxy.database import Database
from ..proxy.module import ProxyModule
from ..tpm import Tpm
from .leaks import SecretRegistry
from .network import SimNetwork
from .sites import TargetSite
from .transcript import Transcript

DEFAULT_SITES = ("bank.example", "mail.example")
PROXY = "proxy"


@dataclass
class SimClock:
    now: float = 1_000_000.0

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class World:
    def __init__(self, seed: int = 7, sites: tuple[str, ...] = DEFAULT_SITES, db_path=None, workdir=None,
                 entropy: str | None = None, clock=None):
        """``entropy`` salts the proxy's stream; a long-running server passes
        fresh bytes so nonces never repeat across restarts, while CA, site
        and TPM identities stay a function of ``seed``."""
        self.seed = seed
        self.rng = Rng(seed)
        self.clock = clock if clock is not None else SimClock()
        self.transcript = Transcript()
        self.network = SimNetwork(self.transcript)
        self.secrets = SecretRegistry()
        self.event_listeners: list = []
        self.ca = CertificateAuthority(self.rng.fork("ca"))
        self.platform = Platform()
        self.reference = ReferenceMeasurements.release()
        self.tpm = Tpm(self.rng.fork("tpm"), self.ca)
        self.tpm.subscribe(self.transcript.add_pcr)
        self.db = Database(db_path)
        self.sites = {s: TargetSite.create(s, self.ca, self.rng.fork(f"site:{s}")) for s in sites}
        for sid, site in self.sites.items():
            self.network.register(sid, site.handle)
        proxy_rng = self.rng.fork("proxy")
        if entropy is not None:
            proxy_rng = proxy_rng.fork(entropy)
        self.proxy = self.make_proxy(proxy_rng, workdir=workdir)
        self.install(self.proxy)
        self.clients: dict[str, Client] = {}

    def make_proxy(self, rng: Rng, cls=ProxyModule, workdir=None) -> ProxyModule:
        proxy = cls(
            tpm=self.tpm,
            platform=self.platform,
            ca_pub=self.ca.public_key,
            reference=self.reference,
            db=self.db,
            rng=rng,
            clock=self.clock,
            site_call=lambda site, frame: self.network.call(PROXY, site, frame),
            workdir=workdir,
        )
        proxy.flicker.observers.append(self.transcript.add_envelope)
        proxy.event_hook = self._proxy_event
        return proxy

    def _proxy_event(self, name: str, detail: str) -> None:
        self.transcript.add_event(name, detail)
        for fn in list(self.event_listeners):
            fn(name, detail)

    def install(self, proxy: ProxyModule) -> None:
        """Route the ``proxy`` endpoint to ``proxy``."""
        self.proxy = proxy
        self.network.register(PROXY, lambda src, frame: proxy.handle(frame))

    def boot(self):
        return self.proxy.start()

    def profile(self, user_id: str) -> ClientProfile:
        return ClientProfile(user_id=user_id, ca_pub=self.ca.public_key, reference=self.reference,
                             proxy_address=PROXY)

    def new_client(self, user_id: str, name: str | None = None) -> Client:
        name = name or f"client:{user_id}:{len(self.clients)}"
        client = Client(
            self.profile(user_id),
            lambda frame: self.network.call(name, PROXY, frame),
            self.rng.fork(name),
            self.clock,
        )
        self.clients[name] = client
        return client

    def add_account(self, site: str, username: str, password: str) -> None:
        self.sites[site].accounts[username] = password
        self.secrets.add(f"{site}:username", username)
        self.secrets.add(f"{site}:password:{len(self.secrets)}", password)

    def files(self) -> dict[str, bytes]:
        out = {"database": self.db.raw_bytes()}
        for name, data in self.proxy.flicker.files.items():
            out[f"flicker/{name}"] = data
        for name, client in self.clients.items():
            out[f"profile/{name}"] = client.profile.to_json().encode()
        return out
