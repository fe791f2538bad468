import pytest

import oracles
from tim import otp
from tim.crypto import KeyPurpose, PublicKey, Rng, decrypt, digest, encrypt, generate_keypair
from tim.encoding import pack_fields, pack_list, u32, unpack_fields
from tim.errors import EncodingError, PalError
from tim.pal import (
    VERDICT_FAIL,
    VERDICT_PASS,
    ModuleImages,
    Option,
    PalEnvelope,
    PassEntry,
    PassList,
    binding_digest,
    hash_master,
    phase_one,
    request,
    run_pal,
)
from tim.tpm import DRTM_PCR, PROXY_KEY_PCR, SealedBlob

PAL = b"PAL image v1"
IMAGES = ModuleImages(flicker=b"Flicker image v1", proxy=b"PM image v1")
# frozen from tests/oracles.py: drtm_chain(PAL, Flicker, PM)
CHAIN = "2b59fac4921b69b74f5581cf520045a6cefa6908"


@pytest.fixture(scope="module")
def pm():
    return generate_keypair(Rng("pal-tests-pm"), KeyPurpose.PROXY)


class Pal:
    """Runs PAL sessions on one TPM the way Flicker does."""

    def __init__(self, tpm, pal=PAL, images=IMAGES):
        self.tpm, self.pal, self.images, self.rng = tpm, pal, images, Rng("pal-run")

    def __call__(self, option, **payload) -> PalEnvelope:
        self.tpm.drtm_launch(self.pal)
        try:
            out = run_pal(self.tpm, self.images, request(option, **payload), self.rng)
        finally:
            self.tpm.drtm_close()
        return PalEnvelope.decode(out)

    def raw(self, envelope: bytes) -> PalEnvelope:
        self.tpm.drtm_launch(self.pal)
        try:
            return PalEnvelope.decode(run_pal(self.tpm, self.images, envelope, self.rng))
        finally:
            self.tpm.drtm_close()


@pytest.fixture
def pal(tpm, pm):
    tpm.extend(PROXY_KEY_PCR, digest(pm.public.encode()), "pm_pub")
    return Pal(tpm)


def tunnel(pal):
    out = pal(Option.SECURE_TUNNEL).raise_for_status().payload
    return PublicKey.decode(out["pal_pub"]), out["sealed_pal_priv"], out["nonce"]


def send(pub, rng=Rng("client"), **fields):
    return encrypt(pub, pack_fields({k: v.encode() if isinstance(v, str) else v for k, v in fields.items()}), rng)


def test_phase_one_chain_matches_oracle(tpm):
    tpm.drtm_launch(PAL)
    value = phase_one(tpm, IMAGES)
    assert value.hex() == CHAIN
    assert value == oracles.drtm_chain(PAL, IMAGES.flicker, IMAGES.proxy)
    tpm.drtm_close()


def test_unknown_option_and_schema_violations_never_raise(pal):
    out = pal.raw(PalEnvelope("format_disk", {}).encode())
    assert out.payload["status"] == b"error" and out.payload["code"] == b"unknown_option"
    out = pal(Option.SECURE_TUNNEL, extra=b"x")
    assert out.payload["code"] == b"malformed"
    out = pal.raw(b"\x00garbage")
    assert out.payload["status"] == b"error"
    with pytest.raises(PalError):
        out.raise_for_status()


def test_phase_one_runs_even_for_bad_input(pal, tpm):
    pal.raw(b"junk")
    labels = [e.label for e in tpm.log(DRTM_PCR).entries]
    assert labels == ["pal", "flicker", "proxy", "drtm-exit"]


def test_initial_sealing_checks_pcr15(pal, pm, tpm):
    out = pal(Option.INITIAL_SEALING, pm_pub=pm.public.encode()).raise_for_status()
    blob = SealedBlob.decode(out.payload["sealed_pm_pub"])
    assert blob.pcr_index == DRTM_PCR and blob.pcr_value_at_seal.hex() == CHAIN
    impostor = generate_keypair(Rng("impostor"), KeyPurpose.PROXY, bits=1024)
    out = pal(Option.INITIAL_SEALING, pm_pub=impostor.public.encode())
    assert out.payload["code"] == b"key_provenance"


def test_secure_tunnel_binds_key_into_pcr18(pal, tpm):
    pub, sealed, nonce = tunnel(pal)
    log = tpm.log(DRTM_PCR)
    assert [e.label for e in log.entries] == ["pal", "flicker", "proxy", "binding", "drtm-exit"]
    assert log.entries[3].digest == binding_digest(pub, nonce)
    assert b"pal_priv" not in sealed and len(nonce) == 20


def test_sealed_key_unusable_under_other_images(pal, tpm, pm):
    pub, sealed, nonce = tunnel(pal)
    ok = pal(Option.INITIAL_SEALING, pm_pub=pm.public.encode()).raise_for_status()
    tampered = Pal(tpm, images=ModuleImages(IMAGES.flicker + b"#", IMAGES.proxy))
    out = tampered(Option.CREDENTIAL_DECRYPTION, enc_cred_with_pal=send(pub, x="y"), sealed_pal_priv=sealed,
                   nonce=nonce, sealed_pm_pub=ok.payload["sealed_pm_pub"], nonce_prime=b"n" * 20)
    assert out.payload["code"] == b"seal_violation"


def register(pal, user="alice", master="m4ster pass", phrase="phrase words", count=5, plist=None):
    pub, sealed, nonce = tunnel(pal)
    payload = dict(enc_data=send(pub, master_password=master, secret_phrase=phrase, user_id=user,
                                 otp_count=u32(count)),
                   sealed_pal_priv=sealed, nonce=nonce)
    if plist:
        payload["sealed_pass_list"] = plist
    return pal(Option.REGISTRATION, **payload).raise_for_status().payload


def authenticate(pal, plist, password, kind="master", user="alice"):
    pub, sealed, nonce = tunnel(pal)
    return pal(Option.AUTHENTICATION, enc_data=send(pub, kind=kind, password=password, user_id=user),
               sealed_pal_priv=sealed, nonce=nonce, sealed_pass_list=plist).raise_for_status().payload


def test_registration_and_master_authentication(pal, tpm):
    reg = register(pal)
    params = otp.OtpParams.from_line(reg["otp_params"].decode())
    assert params.count == 5 and reg["user_id"] == b"alice"
    assert b"m4ster" not in reg["sealed_pass_list"]
    plist = reg["sealed_pass_list"]
    out = authenticate(pal, plist, "m4ster pass")
    assert out["verdict"] == VERDICT_PASS and "sealed_pass_list" not in out
    assert tpm.log(DRTM_PCR).entries[3].digest == digest(VERDICT_PASS)
    assert authenticate(pal, plist, "wrong")["verdict"] == VERDICT_FAIL
    assert tpm.log(DRTM_PCR).entries[3].digest == digest(VERDICT_FAIL)
    assert authenticate(pal, plist, "m4ster pass", user="mallory")["verdict"] == VERDICT_FAIL


def test_otp_authentication_advances_chain(pal):
    reg = register(pal, count=3)
    params = otp.OtpParams.from_line(reg["otp_params"].decode())
    plist = reg["sealed_pass_list"]
    for i in range(1, 4):
        pw = otp.format_password(otp.password_at("phrase words", params, i))
        out = authenticate(pal, plist, pw, "otp")
        assert out["verdict"] == VERDICT_PASS
        stale = authenticate(pal, out["sealed_pass_list"], pw, "otp")
        assert stale["verdict"] == VERDICT_FAIL
        plist = out["sealed_pass_list"]
    assert authenticate(pal, plist, "0" * 40, "otp")["verdict"] == VERDICT_FAIL


def test_reregistration_overwrites(pal):
    first = register(pal, master="one")
    second = register(pal, master="two", plist=first["sealed_pass_list"])
    plist = second["sealed_pass_list"]
    assert authenticate(pal, plist, "two")["verdict"] == VERDICT_PASS
    assert authenticate(pal, plist, "one")["verdict"] == VERDICT_FAIL
    both = register(pal, user="bob", plist=plist)
    assert authenticate(pal, both["sealed_pass_list"], "m4ster pass", user="bob")["verdict"] == VERDICT_PASS


def test_credential_decryption_reencrypts_to_pm(pal, pm):
    sealed_pm = pal(Option.INITIAL_SEALING, pm_pub=pm.public.encode()).raise_for_status().payload["sealed_pm_pub"]
    pub, sealed, nonce = tunnel(pal)
    enc = encrypt(pub, b"username=ada", Rng("c"))
    out = pal(Option.CREDENTIAL_DECRYPTION, enc_cred_with_pal=enc, sealed_pal_priv=sealed, nonce=nonce,
              sealed_pm_pub=sealed_pm, nonce_prime=b"p" * 20).raise_for_status()
    assert b"username=ada" not in out.encode()
    f = unpack_fields(decrypt(pm.private, out.payload["enc_cred_with_pm"]), required=("credentials", "nonce_prime"))
    assert f == {"credentials": b"username=ada", "nonce_prime": b"p" * 20}
    wrong = pal(Option.CREDENTIAL_DECRYPTION, enc_cred_with_pal=enc, sealed_pal_priv=sealed, nonce=b"q" * 20,
                sealed_pm_pub=sealed_pm, nonce_prime=b"p" * 20)
    assert wrong.payload["code"] == b"replay"


def test_data_extraction(pal, pm):
    sealed_pm = pal(Option.INITIAL_SEALING, pm_pub=pm.public.encode()).raise_for_status().payload["sealed_pm_pub"]
    pub, sealed, nonce = tunnel(pal)
    out = pal(Option.DATA_EXTRACTION, enc_data=encrypt(pub, b"blob", Rng("d")), sealed_pal_priv=sealed,
              nonce=nonce, sealed_pm_pub=sealed_pm, nonce_prime=b"z" * 20).raise_for_status()
    f = unpack_fields(decrypt(pm.private, out.payload["enc_data_with_pm"]))
    assert f["data"] == b"blob"


def test_pass_list_encoding():
    params = otp.OtpParams("s", 2)
    e = PassEntry("u", b"s" * 20, hash_master("pw", b"s" * 20), otp.new_chain("p", params).head, 2, params)
    plist = PassList().upsert(e).upsert(PassEntry("a", e.salt, e.master_hash, e.otp_head, 1, params))
    assert [x.user_id for x in plist.entries] == ["a", "u"]
    assert PassList.decode(plist.encode()) == plist
    with pytest.raises(EncodingError):
        PassList.decode(pack_list([e.encode(), e.encode()]))
