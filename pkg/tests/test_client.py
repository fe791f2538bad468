from dataclasses import replace

import pytest

from tim import wire
from tim.client import Client, ClientProfile, Page, check_offer
from tim.crypto import KeyPurpose, Rng, decrypt, generate_keypair
from tim.errors import IntegrityError, PinError, TunnelRefused
from tim.harness.sites import LOGIN
from tim.harness.world import World
from tim.pal import binding_digest
from tim.tpm import MeasurementLog

MASTER, PHRASE = "client master pw", "client phrase"


@pytest.fixture(scope="module")
def world():
    w = World(21)
    w.boot()
    w.add_account("bank.example", "grace.hopper", "COBOL-1959")
    return w


@pytest.fixture(scope="module")
def offer(world):
    challenge = Rng("challenge").nonce()
    frame = world.network.call("t", "proxy", wire.make("tunnel.request", purpose="auth", challenge=challenge))
    return frame, challenge


def refuse(frame, challenge, world, **fields):
    f = dict(frame.fields)
    f.update(fields)
    with pytest.raises(TunnelRefused) as exc:
        check_offer(wire.Frame(frame.kind, f), challenge, world.ca.public_key, world.reference, 0.0)
    return exc.value.reason


def test_honest_offer_pins(world, offer):
    frame, challenge = offer
    pinned = check_offer(frame, challenge, world.ca.public_key, world.reference, 5.0)
    assert pinned.pal_pub.encode() == frame["pal_pub"] and pinned.established_at == 5.0


def test_offer_rejection_reasons(world, offer):
    frame, challenge = offer
    assert refuse(frame, Rng("stale").nonce(), world) == "nonce_mismatch"
    other = generate_keypair(Rng("other-pal"), KeyPurpose.PAL)
    assert refuse(frame, challenge, world, pal_pub=other.public.encode()) == "key_binding"
    assert refuse(frame, challenge, world, nonce=b"\x01" * 20) == "key_binding"
    log = MeasurementLog.decode(frame["sml"])
    assert refuse(frame, challenge, world, sml=MeasurementLog(log.entries[1:]).encode()) == "log_mismatch"
    assert refuse(frame, challenge, world, quote=b"junk") == "malformed"


def test_measurement_mismatch_when_reference_differs(world, offer):
    frame, challenge = offer
    stale_ref = replace(world.reference, proxy=bytes(20))
    with pytest.raises(TunnelRefused) as exc:
        check_offer(frame, challenge, world.ca.public_key, stale_ref, 0.0)
    assert exc.value.reason == "measurement_mismatch"


def test_expected_log_layout(world, offer):
    frame, _ = offer
    log = MeasurementLog.decode(frame["sml"])
    pin = check_offer(frame, offer[1], world.ca.public_key, world.reference, 0.0)
    assert [e.label for e in log.entries] == ["pal", "flicker", "proxy", "binding", "drtm-exit"]
    assert log.entries[3].digest == binding_digest(pin.pal_pub, pin.nonce)


def test_pin_before_send(world):
    c = world.new_client("nobody")
    with pytest.raises(PinError):
        c.visit("bank.example")
    page = Page("t", "bank.example", "login", LOGIN.page_kind, LOGIN, {})
    with pytest.raises(PinError):
        c.addon_encrypt_fields(page, {"username": "x", "password": "y"})


def test_profile_round_trip_and_otp_cursor_survives_restart(world, tmp_path):
    path = tmp_path / "profile.json"
    c = Client(world.profile("frank"), lambda f: world.network.call("frank", "proxy", f), Rng("f"),
               world.clock, profile_path=path)
    c.register(MASTER, PHRASE, otp_count=4)
    first = c.next_otp(PHRASE)
    c.authenticate(first, "otp")
    loaded = ClientProfile.load(path)
    assert loaded.otp_cursor == 1 and loaded.otp_params == c.profile.otp_params
    assert loaded.to_json() == c.profile.to_json()
    restarted = Client(loaded, lambda f: world.network.call("frank2", "proxy", f), Rng("f2"),
                       world.clock, profile_path=path)
    second = restarted.next_otp(PHRASE)
    assert second != first and ClientProfile.load(path).otp_cursor == 2
    restarted.authenticate(second, "otp")
    assert MASTER not in path.read_text() and PHRASE not in path.read_text()


def test_empty_fields_send_nothing(world):
    c = world.new_client("gina")
    c.register(MASTER, PHRASE, otp_count=3)
    c.authenticate(MASTER)
    page = c.visit("bank.example")
    before = len(world.transcript)
    assert c.enroll(page, {"username": "", "password": ""}) is None
    assert len(world.transcript) == before


def test_key_swap_after_pinning_cannot_redirect_credentials(world):
    c = world.new_client("hank")
    c.register(MASTER, PHRASE, otp_count=3)
    c.authenticate(MASTER)
    pinned = c.session.tunnel.pal_pub
    attacker = generate_keypair(Rng("swap"), KeyPurpose.PAL)

    def swap(src, dst, frame):
        if frame.kind == "tunnel.offer":
            return wire.Frame(frame.kind, {**frame.fields, "pal_pub": attacker.public.encode()})
        return frame

    world.network.taps.append(swap)
    try:
        with pytest.raises(TunnelRefused):
            c.authenticate(MASTER)
    finally:
        world.network.taps.remove(swap)
    assert c.session.tunnel.pal_pub == pinned
    page = c.visit("bank.example")
    enc = c.addon_encrypt_fields(page, {"username": "grace.hopper", "password": "COBOL-1959"})
    with pytest.raises(IntegrityError):
        decrypt(attacker.private, enc)


def test_client_frames_never_carry_plaintext(world):
    c = world.new_client("ivy")
    c.register(MASTER, PHRASE, otp_count=3)
    c.authenticate(MASTER)
    c.enroll(c.visit("bank.example"), {"username": "grace.hopper", "password": "COBOL-1959"})
    for _, rec in world.transcript.of_type("frame"):
        for secret in (b"COBOL-1959", b"grace.hopper", MASTER.encode(), PHRASE.encode()):
            assert secret not in rec.fields["data"]
