import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from tim.crypto import CertificateAuthority, Rng, digest
from tim.errors import DrtmError, EncodingError, IntegrityError, SealViolation, TimError, UnknownBlob
from tim.tpm import (
    DRTM_EXIT,
    DRTM_PCR,
    PCR_COUNT,
    MeasurementLog,
    PcrBank,
    PcrHistory,
    Quote,
    SealedBlob,
    Tpm,
    extend_value,
    verify_quote,
)

D = st.binary(min_size=20, max_size=20)

# frozen from tests/oracles.py: extend(extend(0^20, H(b"a")), H(b"b"))
TWO_STEP_CHAIN = "7290751b6b5bebb56ff03c8fdab026bffb4f7cee"


def test_two_step_chain_frozen():
    value = extend_value(extend_value(bytes(20), digest(b"a")), digest(b"b"))
    assert value.hex() == TWO_STEP_CHAIN
    assert value == oracles.extend(oracles.extend(oracles.ZERO, oracles.sha1(b"a")), oracles.sha1(b"b"))


@given(D, D)
def test_extend_matches_oracle(old, m):
    assert extend_value(old, m) == oracles.extend(old, m)


@given(st.lists(D, max_size=8))
def test_log_replay_equals_live_register(measurements):
    bank = PcrBank()
    log = MeasurementLog()
    for m in measurements:
        bank.extend(3, m)
        log = log.append("m", m)
    assert log.replay() == bank.read(3)
    assert MeasurementLog.decode(log.encode()) == log


def test_bank_is_read_only_outside_extend():
    bank = PcrBank()
    assert len(bank.registers) == PCR_COUNT
    with pytest.raises(TypeError):
        bank.registers[0] = b"x" * 20
    with pytest.raises(ValueError):
        bank.read(PCR_COUNT)
    with pytest.raises(ValueError):
        bank.extend(0, b"short")


def test_initial_pcrs_zero(tpm):
    assert all(tpm.pcr_read(i) == bytes(20) for i in range(PCR_COUNT))


def test_drtm_resets_only_pcr18(tpm):
    tpm.extend(4, digest(b"x"), "x")
    tpm.extend(DRTM_PCR, digest(b"stale"), "stale")
    before4 = tpm.pcr_read(4)
    tpm.drtm_launch(b"PAL")
    assert tpm.pcr_read(DRTM_PCR) == oracles.extend(oracles.ZERO, oracles.sha1(b"PAL"))
    assert tpm.pcr_read(4) == before4
    with pytest.raises(DrtmError):
        tpm.drtm_launch(b"PAL")
    closed = tpm.drtm_close()
    assert closed == oracles.extend(oracles.extend(oracles.ZERO, oracles.sha1(b"PAL")), DRTM_EXIT)
    assert [e.label for e in tpm.log(DRTM_PCR).entries] == ["pal", "drtm-exit"]
    with pytest.raises(DrtmError):
        tpm.drtm_close()


def test_observer_sees_every_change(tpm):
    history = PcrHistory()
    tpm.subscribe(history)
    tpm.extend(2, digest(b"a"), "a")
    tpm.drtm_launch(b"P")
    tpm.drtm_close()
    labels = [(i, label) for i, label, _, _ in history.events]
    assert labels == [(2, "a"), (18, "drtm-reset"), (18, "pal"), (18, "drtm-exit")]
    assert history.events[-1][3] == tpm.pcr_read(18)


def test_seal_round_trip_and_violation(tpm):
    tpm.extend(7, digest(b"good"), "good")
    blob = tpm.seal(b"payload", 7)
    assert tpm.unseal(blob) == b"payload"
    assert SealedBlob.decode(blob.encode()) == blob
    tpm.extend(7, digest(b"more"), "more")
    with pytest.raises(SealViolation):
        tpm.unseal(blob)


def test_seal_ciphertext_hides_plaintext(tpm):
    blob = tpm.seal(b"very secret plaintext", 1)
    assert b"very secret" not in blob.encode()


def test_unseal_error_order(tpm, ca):
    blob = tpm.seal(b"payload", 5)
    other = Tpm(Rng("other-tpm"), ca)
    with pytest.raises(UnknownBlob):
        other.unseal(blob)
    bad = SealedBlob(blob.ciphertext[:-1] + bytes([blob.ciphertext[-1] ^ 1]), 5,
                     blob.pcr_value_at_seal, blob.seal_id, blob.srk_id)
    with pytest.raises(IntegrityError):
        tpm.unseal(bad)
    # rewriting the recorded PCR value breaks the header authentication, not the compare
    relabeled = SealedBlob(blob.ciphertext, 5, digest(b"x"), blob.seal_id, blob.srk_id)
    with pytest.raises(IntegrityError):
        tpm.unseal(relabeled)
    tpm.extend(5, digest(b"y"), "y")
    with pytest.raises(SealViolation):
        tpm.unseal(blob)


_PROP_TPM = Tpm(Rng("prop"), CertificateAuthority(Rng("prop-ca"), name="prop-ca"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["extend", "seal", "unseal"]), st.integers(0, 3), D), max_size=12))
def test_unseal_succeeds_iff_pcr_matches(ops):
    t = _PROP_TPM
    t.reset()
    blobs = []
    for op, idx, m in ops:
        if op == "extend":
            t.extend(idx, m)
        elif op == "seal":
            blobs.append((t.seal(m, idx), m))
        elif blobs:
            blob, plain = blobs[idx % len(blobs)]
            match = t.pcr_read(blob.pcr_index) == blob.pcr_value_at_seal
            try:
                assert t.unseal(blob) == plain and match
            except SealViolation:
                assert not match


@pytest.fixture
def quoted(tpm):
    tpm.drtm_launch(b"PAL")
    tpm.extend(DRTM_PCR, digest(b"flicker"), "flicker")
    tpm.drtm_close()
    nonce = Rng("n").nonce()
    return tpm.quote(DRTM_PCR, nonce), nonce, tpm.log(DRTM_PCR)


def test_honest_quote_verifies(quoted, ca):
    q, nonce, log = quoted
    assert verify_quote(q, nonce, log, ca.public_key, DRTM_PCR)
    assert Quote.decode(q.encode()) == q


def test_quote_rejections_are_structured(quoted, ca, tpm):
    q, nonce, log = quoted
    assert verify_quote(q, Rng("other").nonce(), log, ca.public_key).reason == "nonce_mismatch"
    assert verify_quote(q, nonce, log, ca.public_key, pcr_index=17).reason == "wrong_pcr"
    mutated = MeasurementLog(log.entries[:1] + log.entries[2:])
    assert verify_quote(q, nonce, mutated, ca.public_key).reason == "log_mismatch"
    sig = bytearray(q.signature)
    sig[10] ^= 0x80
    bad = Quote(q.pcr_index, q.pcr_value, q.nonce, bytes(sig), q.aik_cert)
    assert verify_quote(bad, nonce, log, ca.public_key).reason == "bad_signature"
    wrong_ca = CertificateAuthority(Rng("wrong-ca"))
    assert verify_quote(q, nonce, log, wrong_ca.public_key).reason == "bad_aik_cert"


def test_quote_byte_sweep(quoted, ca):
    q, nonce, log = quoted
    raw = q.encode()
    for i in range(len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        try:
            verdict = verify_quote(Quote.decode(bytes(bad)), nonce, log, ca.public_key, DRTM_PCR)
        except (TimError, ValueError):
            continue
        assert not verdict, f"flipping byte {i} was accepted"


def test_snapshot_round_trip(tpm):
    tpm.extend(9, digest(b"z"), "z")
    blob = tpm.seal(b"kept", 9)
    restored = Tpm.restore(tpm.snapshot(), Rng("r"))
    assert restored.srk_id == tpm.srk_id
    assert restored.pcr_read(9) == tpm.pcr_read(9)
    assert restored.log(9) == tpm.log(9)
    assert restored.unseal(blob) == b"kept"
    assert restored.snapshot() == tpm.snapshot()


def test_snapshot_rejects_junk(tpm):
    with pytest.raises(EncodingError):
        Tpm.restore(b"junk", Rng(1))
    data = bytearray(tpm.snapshot())
    data[7] = 9
    with pytest.raises(EncodingError):
        Tpm.restore(bytes(data), Rng(1))


@given(st.lists(st.binary(min_size=1, max_size=8), min_size=2, max_size=6, unique=True), st.randoms())
def test_extend_is_order_sensitive(measurements, rnd):
    shuffled = list(measurements)
    rnd.shuffle(shuffled)
    assume(shuffled != measurements)

    def chain(ms):
        value = bytes(20)
        for m in ms:
            value = extend_value(value, digest(m))
        return value

    assert chain(shuffled) != chain(measurements)
