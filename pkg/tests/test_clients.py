import pytest

from gyokuro.clients import testing_request_bytes as request_bytes
from gyokuro.clients import (
    EvidenceBundle,
    HandoverPackage,
    MembershipVerdict,
    Outcome,
    TransportError,
    client_membership_test,
    DataSource,
    client_verify_handover,
    verify_evidence,
)
from gyokuro.core import (
    AttestationAuthority,
    EncodingError,
    generate_key,
    KeyRegistry,
    ProofOfReception,
    sign_checkpoint,
)
from gyokuro.deploy import Deployment
from gyokuro.interposer import UP
from gyokuro.wire import ErrorCode, ProtocolError

from conftest import run


async def _accepted_flow(dep, payload=b"the item under test"):
    src = dep.source()
    pkg = await src.source_submit(payload)
    before = await dep.client().membership_test(pkg)
    await dep.push_batches(1)
    await dep.sync_monitor()
    after = await dep.client().membership_test(pkg)
    return pkg, before, after


def test_item_becomes_testable_after_next_batch():
    async def go():
        async with Deployment(batch_size=2) as dep:
            return await _accepted_flow(dep)

    pkg, before, after = run(go())
    assert pkg.por.cnt_por == 0
    assert before.outcome is Outcome.RETRY_LATER
    assert after.accepted, after
    assert "cnt_pop=1" in after.detail


def test_strict_counter_rule():
    # With cnt_pop equal to cnt_por the item's batch is not yet covered.
    async def go():
        async with Deployment(batch_size=2) as dep:
            await dep.push_batches(1)  # batch 0 of filler
            await dep.sync_monitor()
            pkg = await dep.source().source_submit(b"late item")
            return pkg, await dep.client().membership_test(pkg)

    pkg, verdict = run(go())
    assert pkg.por.cnt_por == 1
    assert verdict.outcome is Outcome.RETRY_LATER
    assert "cnt_pop=0" in verdict.detail


def test_handover_checks_in_order():
    async def go():
        async with Deployment(batch_size=2) as dep:
            pkg = await dep.source().source_submit(b"abc")
            return dep.ids.client_registry(), pkg

    registry, pkg = run(go())
    assert client_verify_handover(pkg, registry) is None
    other_apk = KeyRegistry(apk=AttestationAuthority().apk, expected_measurement=registry.expected_measurement)
    assert client_verify_handover(pkg, other_apk).detail == "report_signature"
    wrong_em = KeyRegistry(apk=registry.apk, expected_measurement=bytes(32))
    assert client_verify_handover(pkg, wrong_em).detail == "measurement"
    swapped = HandoverPackage(type(pkg.item)(b"abd", pkg.item.source_sig, pkg.item.source_key_id), pkg.por)
    assert client_verify_handover(swapped, registry).detail == "por_signature"
    bumped = HandoverPackage(pkg.item, ProofOfReception(pkg.por.tee_sig, pkg.por.cnt_por + 1, pkg.por.report))
    assert client_verify_handover(bumped, registry).detail == "por_signature"


def test_package_and_evidence_files(tmp_path):
    async def go():
        async with Deployment(batch_size=2) as dep:
            pkg = await dep.source().source_submit(b"file me")
            cp = dep.monitor.issue_checkpoint()
            return dep.ids.client_registry(), pkg, cp

    registry, pkg, cp = run(go())
    pkg.save(tmp_path / "pkg.bin")
    assert HandoverPackage.load(tmp_path / "pkg.bin") == pkg
    bundle = EvidenceBundle(pkg, cp)
    bundle.save(tmp_path / "ev.bin")
    loaded = EvidenceBundle.load(tmp_path / "ev.bin")
    assert loaded == bundle and verify_evidence(loaded, registry)
    with pytest.raises(EncodingError):
        HandoverPackage.from_bytes(b"XXXX" + pkg.to_bytes()[4:])
    with pytest.raises(EncodingError):
        EvidenceBundle.from_bytes(pkg.to_bytes())


def test_forged_evidence_rejected():
    async def go():
        async with Deployment(batch_size=2) as dep:
            pkg = await dep.source().source_submit(b"x")
            fake_key = generate_key()
            return dep.ids.client_registry(), pkg, sign_checkpoint(fake_key, "monitor-1", bytes(32))

    registry, pkg, cp = run(go())
    assert not verify_evidence(EvidenceBundle(pkg, cp), registry)


def test_source_errors_surface():
    async def go():
        async with Deployment(batch_size=2) as dep:
            src = dep.source()
            item = src.make_item(b"ok")
            bad = type(item)(b"not ok", item.source_sig, item.source_key_id)
            with pytest.raises(ProtocolError) as exc:
                await src.submit_item(bad)
            return exc.value.code

    assert run(go()) is ErrorCode.SIGNATURE_INVALID


def test_unreachable_peers_mean_retry_later():
    async def go():
        async with Deployment(batch_size=2) as dep:
            pkg = await dep.source().source_submit(b"x")
            registry = dep.ids.client_registry()
            tee = dep.tee_address
        # Everything is closed now.
        verdict = await client_membership_test(pkg, ("127.0.0.1", 1), tee, registry, timeout=0.5)
        src = DataSource(generate_key(), "s", ("127.0.0.1", 1), timeout=0.5)
        with pytest.raises(TransportError):
            await src.source_submit(b"y")
        await src.close()
        return verdict

    verdict = run(go())
    assert verdict.outcome is Outcome.RETRY_LATER
    assert verdict.detail.startswith("monitor_unreachable")


def test_verdict_str():
    assert str(MembershipVerdict(Outcome.ACCEPTED)) == "accepted"
    assert str(MembershipVerdict(Outcome.RETRY_LATER, "x")) == "retry_later(x)"


class TestPrivacy:
    def test_request_bytes_independent_of_item(self, keys):
        cp = sign_checkpoint(keys.monitor, "mon", bytes(range(32)))
        assert request_bytes(None, cp) == request_bytes(object(), cp)

    def test_wire_traffic_carries_no_item_data(self):
        async def go():
            async with Deployment(batch_size=2, links={"client-tee": []}) as dep:
                pkg, _, verdict = await _accepted_flow(dep, payload=b"UNIQUE-PAYLOAD-0123456789")
                sent = dep.interposers["client-tee"].sent(UP)
                return pkg, verdict, sent, dep.monitor.issue_checkpoint()

        pkg, verdict, sent, cp = run(go())
        assert verdict.accepted
        assert sent[-1] == request_bytes(pkg, cp)
        secrets = [pkg.item.payload, pkg.item.source_sig, pkg.por.tee_sig, pkg.por.encode(), pkg.item.encode()]
        blob = b"".join(sent)
        for s in secrets:
            assert s not in blob
