import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle_canonical import oracle_canonical_bytes
from ssc.envelope import (
    AlreadySigned,
    Body,
    Envelope,
    InvalidAddress,
    KeyDirectory,
    MalformedEnvelope,
    MissingCorrelation,
    PortAddress,
    ServiceAddress,
    UnknownKey,
    build_envelope,
    canonical_bytes,
    envelope_from_dict,
    generate_keypair,
    parse_envelope,
    serialize_envelope,
    sign_envelope,
    verify_envelope,
)

SENDER = PortAddress("comune_a", "porta_delegata")
DEST = ServiceAddress("comune_b", "anagrafe")

ident = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-."),
    min_size=1,
    max_size=24,
)
# texts may contain anything JSON-representable, including controls and unicode
free_text = st.text(min_size=0, max_size=40)


@st.composite
def envelopes(draw):
    kind = draw(st.sampled_from(["request", "response", "event", "fault"]))
    needs_corr = kind in ("response", "fault")
    correlation = draw(ident) if needs_corr or draw(st.booleans()) else None
    env = build_envelope(
        PortAddress(draw(ident), draw(ident)),
        ServiceAddress(draw(ident), draw(ident)),
        draw(st.sampled_from(["sync", "async_event", "async_process"])),
        kind,
        draw(st.binary(min_size=0, max_size=64)),
        content_type=draw(free_text.filter(lambda s: True)) or "application/octet-stream",
        correlation_id=correlation,
    )
    return env


def signed_sample(payload=b"ping"):
    directory = KeyDirectory()
    priv, pub = generate_keypair()
    directory.add_key("comune_a", "k1", pub)
    env = build_envelope(SENDER, DEST, "sync", "request", payload)
    return sign_envelope(env, priv, "comune_a", "k1", directory), priv, directory


class TestBuild:
    def test_constructor_contract(self):
        env = build_envelope(SENDER, DEST, "sync", "request", "ping")
        assert env.profile == "sync"
        assert env.security is None
        assert env.body.payload == b"ping"

    def test_response_without_correlation(self):
        with pytest.raises(MissingCorrelation):
            build_envelope(SENDER, DEST, "sync", "response", b"x")

    def test_fault_without_correlation(self):
        with pytest.raises(MissingCorrelation):
            build_envelope(SENDER, DEST, "sync", "fault", b"x")

    def test_fresh_ids(self):
        a = build_envelope(SENDER, DEST, "sync", "request", b"x")
        b = build_envelope(SENDER, DEST, "sync", "request", b"x")
        assert a.envelope_id != b.envelope_id

    @pytest.mark.parametrize(
        "sender,dest",
        [
            (PortAddress("", "p"), DEST),
            (PortAddress("a", ""), DEST),
            (SENDER, ServiceAddress("", "s")),
            (SENDER, ServiceAddress("b", "")),
        ],
    )
    def test_empty_identifier(self, sender, dest):
        with pytest.raises(InvalidAddress):
            build_envelope(sender, dest, "sync", "request", b"x")


class TestCanonical:
    @given(envelopes())
    @settings(max_examples=150, deadline=None)
    def test_round_trip(self, env):
        assert parse_envelope(serialize_envelope(env)) == env

    @given(envelopes())
    @settings(max_examples=100, deadline=None)
    def test_determinism(self, env):
        assert canonical_bytes(env) == canonical_bytes(env)
        again = parse_envelope(serialize_envelope(env))
        assert canonical_bytes(again) == canonical_bytes(env)

    @given(envelopes())
    @settings(max_examples=100, deadline=None)
    def test_matches_independent_oracle(self, env):
        assert canonical_bytes(env) == oracle_canonical_bytes(env)

    def test_field_order_independence(self):
        env = build_envelope(SENDER, DEST, "sync", "request", b"hi", correlation_id="c-1")
        shuffled = dict(reversed(list(json.loads(serialize_envelope(env)).items())))
        assert canonical_bytes(envelope_from_dict(shuffled)) == canonical_bytes(env)

    def test_security_excluded_from_canonical(self):
        env, _, _ = signed_sample()
        assert b"security" not in canonical_bytes(env)
        assert b"security" in serialize_envelope(env)


class TestParse:
    def test_truncated(self):
        data = serialize_envelope(build_envelope(SENDER, DEST, "sync", "request", b"x"))
        with pytest.raises(MalformedEnvelope):
            parse_envelope(data[: len(data) // 2])

    def test_unknown_fields_ignored(self):
        env = build_envelope(SENDER, DEST, "sync", "request", b"x")
        obj = json.loads(serialize_envelope(env))
        obj["x_extension"] = {"anything": 1}
        parsed = envelope_from_dict(obj)
        assert parsed == env  # extras dropped, not preserved

    def test_missing_field_diagnostic(self):
        obj = json.loads(serialize_envelope(build_envelope(SENDER, DEST, "sync", "request", b"x")))
        del obj["sender"]
        with pytest.raises(MalformedEnvelope, match="sender"):
            envelope_from_dict(obj)

    def test_bad_base64_diagnostic(self):
        obj = json.loads(serialize_envelope(build_envelope(SENDER, DEST, "sync", "request", b"x")))
        obj["body"]["payload"] = "!!!"
        with pytest.raises(MalformedEnvelope, match="body.payload"):
            envelope_from_dict(obj)

    def test_bad_timestamp(self):
        obj = json.loads(serialize_envelope(build_envelope(SENDER, DEST, "sync", "request", b"x")))
        obj["created_at"] = "2026-08-08 10:00:00"
        with pytest.raises(MalformedEnvelope, match="created_at"):
            envelope_from_dict(obj)


class TestSignVerify:
    def test_round_trip_valid(self):
        env, _, directory = signed_sample()
        assert verify_envelope(env, directory).valid

    def test_every_single_byte_tamper_detected(self):
        # Oracle: exhaustive single-byte flip over the canonical content.
        env, _, directory = signed_sample(payload=b"attestato di residenza")
        content = bytearray(canonical_bytes(env))
        from ssc.envelope import SIGNATURE_ALGORITHMS

        _, verify = SIGNATURE_ALGORITHMS["ed25519"]
        record = directory.get("comune_a", "k1")
        for pos in range(len(content)):
            mutated = bytearray(content)
            mutated[pos] ^= 0x01
            assert not verify(record.public_key, env.security.signature, bytes(mutated)), pos

    def test_payload_tamper_rejected_via_report(self):
        env, _, directory = signed_sample(payload=b"abcdef")
        for pos in range(len(env.body.payload)):
            broken = bytearray(env.body.payload)
            broken[pos] ^= 0xFF
            from dataclasses import replace

            tampered = replace(env, body=Body(env.body.content_type, bytes(broken)))
            report = verify_envelope(tampered, directory)
            assert not report.valid
            assert report.reason == "bad_signature"

    def test_sign_with_revoked_key(self):
        directory = KeyDirectory()
        priv, pub = generate_keypair()
        directory.add_key("comune_a", "k1", pub)
        directory.revoke_key("comune_a", "k1")
        env = build_envelope(SENDER, DEST, "sync", "request", b"x")
        with pytest.raises(UnknownKey):
            sign_envelope(env, priv, "comune_a", "k1", directory)

    def test_sign_twice(self):
        env, priv, directory = signed_sample()
        with pytest.raises(AlreadySigned):
            sign_envelope(env, priv, "comune_a", "k1", directory)

    def test_wrong_private_key(self):
        directory = KeyDirectory()
        _, pub = generate_keypair()
        other_priv, _ = generate_keypair()
        directory.add_key("comune_a", "k1", pub)
        env = build_envelope(SENDER, DEST, "sync", "request", b"x")
        with pytest.raises(UnknownKey):
            sign_envelope(env, other_priv, "comune_a", "k1", directory)

    def test_unsigned_reported(self):
        env = build_envelope(SENDER, DEST, "sync", "request", b"x")
        report = verify_envelope(env, KeyDirectory())
        assert (report.valid, report.reason) == (False, "missing_signature")

    def test_revoked_after_signing(self):
        env, _, directory = signed_sample()
        directory.revoke_key("comune_a", "k1")
        assert verify_envelope(env, directory).reason == "revoked_key"

    def test_signer_mismatch_claimed_admin(self):
        env, _, directory = signed_sample()
        from dataclasses import replace

        directory.add_key("comune_b", "kb", generate_keypair()[1])
        forged = replace(env, security=replace(env.security, signer_admin_id="comune_b"))
        assert verify_envelope(forged, directory).reason == "signer_mismatch"

    def test_strip_and_resign(self):
        env, priv, directory = signed_sample()
        from dataclasses import replace

        stripped = replace(env, security=None)
        resigned = sign_envelope(stripped, priv, "comune_a", "k1", directory)
        assert verify_envelope(resigned, directory).valid

    def test_unknown_key_reason(self):
        env, _, _ = signed_sample()
        assert verify_envelope(env, KeyDirectory()).reason == "unknown_key"
