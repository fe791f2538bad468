import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tim import otp
from tim.errors import ChainExhausted, EncodingError

# frozen from tests/oracles.py
HEAD_5 = "6e6280a47530a4f7e2677cf931eed85f9dd2393e"
FIRST_3 = [
    "f0b72e4d0223c78d4f339c9f509012a0746a23c1",
    "e5b7d090de64bf13b9825031f89da68e04e421ac",
    "68d7246c3ea9a9977f6078933784496dc6a7cab5",
]
PHRASE, SEED = "the secret phrase", "a1b2c3"


def test_frozen_vectors():
    assert otp.new_chain(PHRASE, otp.OtpParams(SEED, 5)).head.hex() == HEAD_5
    assert [otp.format_password(p) for p in otp.derive_chain(PHRASE, otp.OtpParams(SEED, 3))] == FIRST_3


@settings(max_examples=30, deadline=None)
@given(st.text(min_size=1, max_size=20), st.integers(min_value=1, max_value=40))
def test_chain_matches_naive_oracle(phrase, n):
    params = otp.OtpParams("s33d", n)
    assert otp.derive_chain(phrase, params) == oracles.otp_chain(phrase, "s33d", n)
    assert otp.new_chain(phrase, params).head == oracles.otp_head(phrase, "s33d", n)
    for i in (1, n):
        assert otp.password_at(phrase, params, i) == oracles.otp_chain(phrase, "s33d", n)[i - 1]


def test_each_password_accepted_once_in_order():
    params = otp.OtpParams(SEED, 6)
    chain = otp.new_chain(PHRASE, params)
    passwords = otp.derive_chain(PHRASE, params)
    for i, pw in enumerate(passwords):
        ok, chain = otp.verify_and_advance(chain, pw)
        assert ok and chain.remaining == 6 - i - 1
        for used in passwords[: i + 1]:
            again, same = otp.verify_and_advance(chain, used) if chain.remaining else (False, chain)
            assert not again and same == chain
    with pytest.raises(ChainExhausted):
        otp.verify_and_advance(chain, passwords[-1])


def test_skipping_ahead_is_rejected():
    params = otp.OtpParams(SEED, 5)
    chain = otp.new_chain(PHRASE, params)
    ok, after = otp.verify_and_advance(chain, otp.password_at(PHRASE, params, 2))
    assert not ok and after == chain


def test_params_line_round_trip_and_validation():
    p = otp.OtpParams("abc123", 42)
    assert p.to_line() == "otp/v1;seed=abc123;n=42"
    assert otp.OtpParams.from_line(p.to_line()) == p
    for bad in ("otp/v1;seed=abc;n=0", "otp/v2;seed=abc;n=4", "otp/v1;seed=;n=4", "garbage"):
        with pytest.raises(EncodingError):
            otp.OtpParams.from_line(bad)
    with pytest.raises(ValueError):
        otp.OtpParams("a;b", 3)


def test_password_text_format():
    pw = otp.password_at(PHRASE, otp.OtpParams(SEED, 3), 1)
    text = otp.format_password(pw)
    assert len(text) == 40 and otp.parse_password(text.upper()) == pw
    with pytest.raises(EncodingError):
        otp.parse_password("xyz")
    with pytest.raises(ChainExhausted):
        otp.password_at(PHRASE, otp.OtpParams(SEED, 3), 4)
