import hashlib
import struct

import pytest

from gyokuro.core import (
    GENESIS,
    AttestationAuthority,
    AttestationReport,
    DataItem,
    EncodingError,
    KeyRegistry,
    MonitorCheckpoint,
    ProofOfProcessing,
    ProofOfReception,
    Tag,
    UnknownKeyError,
    canonical_encode,
    fold,
    generate_key,
    hash_chain_step,
    issue_report,
    load_private_pem,
    measurement_of,
    pop_preimage,
    por_preimage,
    private_pem,
    public_bytes,
    sign,
    sign_checkpoint,
    sign_item,
    verify,
    verify_checkpoint,
    verify_por,
    verify_report,
)

from conftest import MEASUREMENT

# Reference values computed once with plain hashlib/struct and frozen here.
STEP_GENESIS_A = "5887112ce0e3889cfc45a20ec970cf8adbfb97792751402e1d121752b5b2121b"
FOLD_AB = "4dba21208037f5544494d99af2682ddfce687f8d317d75017365ea7795e60f07"
FOLD_BA = "c05b9aab24fabfaf4d3acc849efb1004edca2b25da4e014a6158aded9b197db3"
POR_AB_3_DIGEST = "d56730b2c04b1d6ff054f9b72ca9567ccd0b4c10fe1338af6e6e8fdb01c0c849"


def reference_por_preimage(payload, cnt, measurement, pk, authority_sig):
    """Second encoder for tag 0x01, written from the byte layout alone."""

    def be64(n):
        return n.to_bytes(8, "big")

    report = bytearray([0x06])
    report += measurement
    report += be64(len(pk)) + pk
    report += be64(len(authority_sig)) + authority_sig
    out = bytearray([0x01])
    out += be64(len(payload)) + payload
    out += be64(cnt)
    out += be64(len(report)) + report
    return bytes(out)


FIXED_REPORT = AttestationReport(bytes([0x11]) * 32, b"\x04" + bytes([0x22]) * 64, bytes([0x33]) * 70)


class TestCanonicalEncode:
    def test_pop_zero_counter(self):
        assert canonical_encode(Tag.POP, 0) == bytes.fromhex("02" + "00" * 8)

    def test_item_ab(self):
        assert canonical_encode(Tag.ITEM, b"ab") == b"\x05" + b"\x00" * 7 + b"\x02" + b"ab"

    def test_por_matches_reference_encoder(self):
        got = por_preimage(b"ab", 3, FIXED_REPORT)
        ref = reference_por_preimage(b"ab", 3, FIXED_REPORT.measurement, FIXED_REPORT.tee_public_key, FIXED_REPORT.authority_sig)
        assert got == ref
        assert len(got) == 211
        assert hashlib.sha256(got).hexdigest() == POR_AB_3_DIGEST

    def test_checkpoint_and_chain_layouts(self):
        hc = bytes(range(32))
        assert canonical_encode(Tag.CHECKPOINT, hc) == b"\x03" + hc
        assert canonical_encode(Tag.CHAIN_STEP, hc, b"x") == b"\x04" + hc + struct.pack(">Q", 1) + b"x"
        assert canonical_encode(Tag.REPORT, hc, b"pk") == b"\x06" + hc + struct.pack(">Q", 2) + b"pk"

    def test_report_bytes_layout(self):
        r = FIXED_REPORT
        assert r.to_bytes() == r.signed_bytes() + struct.pack(">Q", 70) + r.authority_sig
        assert AttestationReport.from_bytes(r.to_bytes()) == r

    @pytest.mark.parametrize("tag", [0x00, 0x07, 0xFF])
    def test_unknown_tag(self, tag):
        with pytest.raises(EncodingError):
            canonical_encode(tag, b"x")

    def test_field_count_mismatch(self):
        with pytest.raises(EncodingError):
            canonical_encode(Tag.POP)
        with pytest.raises(EncodingError):
            canonical_encode(Tag.ITEM, b"a", b"b")

    def test_field_type_checks(self):
        with pytest.raises(EncodingError):
            canonical_encode(Tag.POP, b"\x00")
        with pytest.raises(EncodingError):
            canonical_encode(Tag.POP, True)
        with pytest.raises(EncodingError):
            canonical_encode(Tag.CHECKPOINT, bytes(31))
        with pytest.raises(EncodingError):
            canonical_encode(Tag.ITEM, "text")

    def test_u64_range(self):
        canonical_encode(Tag.POP, 2**64 - 1)
        with pytest.raises(EncodingError):
            canonical_encode(Tag.POP, 2**64)
        with pytest.raises(EncodingError):
            canonical_encode(Tag.POP, -1)


class TestHashChain:
    def test_empty_fold_is_identity(self):
        assert fold(GENESIS, []) == GENESIS

    def test_single_step_reference(self):
        assert hash_chain_step(GENESIS, b"a").hex() == STEP_GENESIS_A

    def test_two_items_reference_and_order(self):
        assert fold(GENESIS, [b"a", b"b"]).hex() == FOLD_AB
        assert fold(GENESIS, [b"b", b"a"]).hex() == FOLD_BA
        assert fold(GENESIS, [b"a", b"b"]) == hash_chain_step(hash_chain_step(GENESIS, b"a"), b"b")

    def test_item_and_payload_fold_alike(self, keys):
        item = sign_item(keys.source, "src", b"a")
        assert hash_chain_step(GENESIS, item) == hash_chain_step(GENESIS, b"a")

    def test_bad_previous_value(self):
        with pytest.raises(EncodingError):
            hash_chain_step(bytes(31), b"a")


class TestSignatures:
    def test_empty_message_round_trip(self):
        k = generate_key()
        assert verify(k.public_key(), b"", sign(k, b""))

    def test_wrong_key(self):
        k1, k2 = generate_key(), generate_key()
        assert not verify(k2.public_key(), b"m", sign(k1, b"m"))

    def test_one_bit_flip_sweep(self):
        k = generate_key()
        msg = b"membership-test!"
        sig = sign(k, msg)
        for i in range(len(msg) * 8):
            flipped = bytearray(msg)
            flipped[i // 8] ^= 1 << (i % 8)
            assert not verify(k.public_key(), bytes(flipped), sig), i

    def test_deterministic(self):
        k = generate_key()
        assert sign(k, b"m") == sign(k, b"m")

    def test_malformed_inputs_return_false(self):
        k = generate_key()
        assert not verify(k.public_key(), b"m", b"")
        assert not verify(k.public_key(), b"m", b"\x30\x00garbage")
        assert not verify(b"\x04" + bytes(64), b"m", sign(k, b"m"))
        assert not verify(b"short", b"m", sign(k, b"m"))

    def test_public_key_bytes_accepted(self):
        k = generate_key()
        assert len(public_bytes(k)) == 65
        assert verify(public_bytes(k), b"m", sign(k, b"m"))

    def test_pem_round_trip(self):
        k = generate_key()
        assert public_bytes(load_private_pem(private_pem(k))) == public_bytes(k)


class TestReports:
    def test_issue_then_verify(self):
        auth = AttestationAuthority()
        report = auth.issue(MEASUREMENT, public_bytes(generate_key()))
        assert verify_report(report, auth.apk, MEASUREMENT)

    def test_measurement_mismatch(self):
        auth = AttestationAuthority()
        report = auth.issue(MEASUREMENT, public_bytes(generate_key()))
        assert not verify_report(report, auth.apk, bytes(32))

    def test_rogue_authority(self):
        auth, rogue = AttestationAuthority(), generate_key()
        report = issue_report(rogue, MEASUREMENT, public_bytes(generate_key()))
        assert not verify_report(report, auth.apk, MEASUREMENT)

    def test_measurement_of_is_order_independent_for_mappings(self):
        assert measurement_of({"a": b"1", "b": b"2"}) == measurement_of({"b": b"2", "a": b"1"})
        assert measurement_of({"a": b"1"}) != measurement_of({"a": b"2"})


class TestDomainTypes:
    def test_item_round_trip(self, keys):
        item = sign_item(keys.source, "src", b"payload")
        assert DataItem.decode(item.encode()) == item
        assert verify(keys.source.public_key(), item.signing_bytes(), item.source_sig)

    def test_empty_payload_rejected(self, keys):
        with pytest.raises(ValueError):
            sign_item(keys.source, "src", b"")

    def test_por_round_trip_and_verify(self, keys):
        tee_key = generate_key()
        report = keys.authority.issue(MEASUREMENT, public_bytes(tee_key))
        por = ProofOfReception(sign(tee_key, por_preimage(b"d", 7, report)), 7, report)
        assert ProofOfReception.decode(por.encode()) == por
        assert verify_por(por, b"d")
        assert not verify_por(por, b"e")

    def test_pop_round_trip(self):
        k = generate_key()
        pop = ProofOfProcessing(sign(k, pop_preimage(5)), 5)
        assert ProofOfProcessing.decode(pop.encode()) == pop

    def test_checkpoint_round_trip_and_tamper(self, keys):
        cp = sign_checkpoint(keys.monitor, "mon", bytes(range(32)))
        assert MonitorCheckpoint.decode(cp.encode()) == cp
        assert verify_checkpoint(cp, keys.monitor.public_key())
        assert not verify_checkpoint(cp, generate_key().public_key())
        for i in range(32):
            hc = bytearray(cp.hc_m)
            hc[i] ^= 0x80
            assert not verify_checkpoint(MonitorCheckpoint(bytes(hc), cp.monitor_sig, "mon"), keys.monitor.public_key())

    def test_truncated_and_trailing(self, keys):
        enc = sign_item(keys.source, "src", b"abc").encode()
        with pytest.raises(EncodingError):
            DataItem.decode(enc[:-1])
        with pytest.raises(EncodingError):
            DataItem.decode(enc + b"\x00")
        with pytest.raises(EncodingError):
            AttestationReport.from_bytes(b"\x01" + FIXED_REPORT.to_bytes()[1:])

    def test_registry_lookups_fail_explicitly(self, keys):
        reg = keys.registry()
        assert reg.source_key("src") is not None
        with pytest.raises(UnknownKeyError):
            reg.source_key("nobody")
        with pytest.raises(UnknownKeyError):
            KeyRegistry(apk=keys.authority.apk, expected_measurement=MEASUREMENT).monitor_key("mon")
