"""``tim-client``: the user-side CLI against a proxy started with ``tim serve``.

The profile is one versioned JSON file. The live session (pinned tunnel,
sequence counter, last visited page) is kept next to it in
``<profile>.session`` so consecutive invocations continue one session.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import sys
from pathlib import Path

from .artifacts import ReferenceMeasurements
from .client import Client, ClientProfile, ClientSession, Page, PinnedTunnel
from .crypto import Nonce, PublicKey, Rng
from .errors import PinError, TimError
from .proxy.forms import FormSchema
from .transport import tcp_transport

SESSION_VERSION = 1


def _session_path(profile_path: Path) -> Path:
    return profile_path.with_name(profile_path.name + ".session")


def save_session(path: Path, session: ClientSession | None, page: Page | None) -> None:
    if session is None:
        path.unlink(missing_ok=True)
        return
    t = session.tunnel
    data = {
        "version": SESSION_VERSION,
        "session_id": session.session_id,
        "user_id": session.user_id,
        "seq": session.seq,
        "tunnel": {
            "tunnel_id": t.tunnel_id,
            "pal_pub": t.pal_pub.encode().hex(),
            "nonce": bytes(t.nonce).hex(),
            "established_at": t.established_at,
        },
        "page": None if page is None else {
            "token": page.token,
            "site": page.site,
            "page": page.page,
            "schema": page.schema.encode().hex(),
            "fields": page.fields,
        },
    }
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
    os.replace(tmp, path)


def load_session(path: Path) -> tuple[ClientSession | None, Page | None]:
    if not path.exists():
        return None, None
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("version") != SESSION_VERSION:
        return None, None
    t = d["tunnel"]
    tunnel = PinnedTunnel(t["tunnel_id"], PublicKey.decode(bytes.fromhex(t["pal_pub"])),
                          Nonce(bytes.fromhex(t["nonce"])), float(t["established_at"]))
    session = ClientSession(d["session_id"], d["user_id"], tunnel, int(d["seq"]))
    page = None
    if d["page"]:
        p = d["page"]
        schema = FormSchema.decode(bytes.fromhex(p["schema"]))
        page = Page(p["token"], p["site"], p["page"], schema.page_kind, schema, dict(p["fields"]))
    return session, page


def _secret(value: str | None, prompt: str) -> str:
    return value if value is not None else getpass.getpass(prompt)


def _fields(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"field {pair!r} is not name=value")
        out[name] = value
    return out


def _show_page(page: Page) -> None:
    print(f"{page.site}/{page.page} ({page.kind.value} page)")
    for name in page.schema.field_names:
        marker = " (credential)" if name in page.schema.credential_fields else ""
        print(f"  {name} = {page.fields.get(name, '')!r}{marker}")


def cmd_init(args, profile_path: Path) -> int:
    boot = json.loads(Path(args.bootstrap).read_text(encoding="utf-8"))
    profile = ClientProfile(
        user_id=args.user,
        ca_pub=PublicKey.decode(bytes.fromhex(boot["ca_pub"])),
        reference=ReferenceMeasurements.decode(bytes.fromhex(boot["reference"])),
        proxy_address=args.address or boot["proxy_address"],
    )
    profile.save(profile_path)
    print(f"profile for {args.user} written to {profile_path}")
    return 0


def run_command(args, client: Client, page: Page | None) -> Page | None:
    """Execute one client command; returns the page to remember."""
    if args.command == "register":
        master = _secret(args.master, "master password: ")
        phrase = _secret(args.phrase, "secret phrase: ")
        params = client.register(master, phrase, otp_count=args.otp_count)
        print(f"registered {client.profile.user_id}; one-time passwords: {params.count}")
        return None
    if args.command == "login":
        if args.otp:
            password = client.next_otp(_secret(args.phrase, "secret phrase: "))
            client.authenticate(password, "otp")
        else:
            client.authenticate(_secret(args.password, "master password: "))
        print(f"authenticated as {client.profile.user_id}; PAL key pinned")
        return None
    if args.command == "otp-list":
        for i, pw in enumerate(client.otp_list(_secret(args.phrase, "secret phrase: ")), 1):
            mark = "*" if i <= client.profile.otp_cursor else " "
            print(f"{mark}{i:4d} {pw}")
        return page
    if args.command == "visit":
        page = client.visit(args.site, args.page)
        _show_page(page)
        return page
    if page is None:
        raise PinError("visit a page first")
    if args.command == "enroll":
        result = client.enroll(page, _fields(args.field))
    elif args.command == "submit":
        result = client.submit(page)
    elif args.command == "update":
        result = client.update(page, _fields(args.field))
    else:
        raise SystemExit(f"unknown command {args.command}")
    if result is None:
        print("no credential fields given; nothing sent")
        return page
    print(f"{result.site}: {'ok' if result.ok else 'failed'} ({result.detail})")
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tim-client", description=__doc__)
    p.add_argument("--profile", default=os.environ.get("TIM_PROFILE", "tim-profile.json"))
    sub = p.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init", help="create a profile from a proxy bootstrap file")
    init.add_argument("--bootstrap", required=True)
    init.add_argument("--user", required=True)
    init.add_argument("--address", help="proxy host:port (defaults to the bootstrap value)")

    reg = sub.add_parser("register", help="register master password and secret phrase")
    reg.add_argument("--master")
    reg.add_argument("--phrase")
    reg.add_argument("--otp-count", type=int)

    login = sub.add_parser("login", help="authenticate and pin a fresh PAL key")
    login.add_argument("--password")
    login.add_argument("--otp", action="store_true", help="use the next one-time password")
    login.add_argument("--phrase")

    ol = sub.add_parser("otp-list", help="print the one-time password list")
    ol.add_argument("--phrase")

    visit = sub.add_parser("visit", help="load a page through the proxy")
    visit.add_argument("site")
    visit.add_argument("--page", default="login")

    for name, helptext in (("enroll", "enroll credentials on the last visited login page"),
                           ("update", "change credentials on the last visited update page")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--field", action="append", default=[], metavar="NAME=VALUE")
    sub.add_parser("submit", help="submit the last visited login page")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    profile_path = Path(args.profile)
    try:
        if args.command == "init":
            return cmd_init(args, profile_path)
        profile = ClientProfile.load(profile_path)
        client = Client(profile, tcp_transport(profile.proxy_address), Rng(), profile_path=profile_path)
        spath = _session_path(profile_path)
        client.session, page = load_session(spath)
        page = run_command(args, client, page)
        save_session(spath, client.session, page)
    except TimError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
