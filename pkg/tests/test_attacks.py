import xml.etree.ElementTree as ET

import pytest

from gyokuro import attacks
from gyokuro.attacks import Attempt, Expected, judge
from gyokuro.clients import MembershipVerdict, Outcome

from conftest import run

NAMES = [s.name for s in attacks.scenario_catalog()]


def test_catalog_shape():
    cat = attacks.scenario_catalog()
    assert len(cat) == 12 and len(set(NAMES)) == 12
    assert {s.threat for s in cat} == {"network", "tee", "database"}
    with pytest.raises(KeyError):
        attacks.get_scenario("nope")


@pytest.mark.parametrize("name", NAMES)
def test_scenario_attack_and_control(name):
    attack, control = run(attacks.run_catalog([0], control=None, names=[name]))
    assert attack.passed, attack.line() + "\n" + "\n".join(attack.attempts)
    assert control.passed, control.line() + "\n" + "\n".join(control.attempts)
    assert attack.no_false_accept and control.no_false_accept


def _a(outcome, possessed=True, detail=""):
    return Attempt("x", b"p", MembershipVerdict(outcome, detail), possessed)


class TestJudge:
    def test_no_attempts_fails(self):
        assert not judge(Expected.DETECTED, [], {}, False)[0]

    def test_control_requires_acceptance(self):
        assert judge(Expected.NEVER_ACCEPTS, [_a(Outcome.ACCEPTED)], {}, True)[0]
        assert not judge(Expected.NEVER_ACCEPTS, [_a(Outcome.RETRY_LATER)], {}, True)[0]

    def test_never_accepts(self):
        assert judge(Expected.NEVER_ACCEPTS, [_a(Outcome.RETRY_LATER)], {}, False)[0]
        assert not judge(Expected.NEVER_ACCEPTS, [_a(Outcome.ACCEPTED)], {}, False)[0]

    def test_detected_needs_rejection(self):
        assert not judge(Expected.DETECTED, [_a(Outcome.RETRY_LATER)], {}, False)[0]

    def test_facts_gate(self):
        assert not judge(Expected.EVIDENCE_AT_MONITOR, [_a(Outcome.ACCEPTED)], {"held": False}, False)[0]
        assert judge(Expected.EVIDENCE_AT_MONITOR, [_a(Outcome.ACCEPTED)], {"held": True}, False)[0]

    def test_harmless_accept_requires_possession(self):
        assert judge(Expected.HARMLESS_ACCEPT, [_a(Outcome.ACCEPTED)], {}, False)[0]
        assert not judge(Expected.HARMLESS_ACCEPT, [_a(Outcome.ACCEPTED, possessed=False)], {}, False)[0]


def test_junit_output(tmp_path):
    results = run(attacks.run_catalog([1], control=False, names=["tamper_messages"]))
    path = tmp_path / "junit.xml"
    attacks.write_junit(results, path)
    suite = ET.parse(path).getroot()
    assert suite.get("tests") == "1" and suite.get("failures") == "0"
    assert suite.find("testcase").get("classname") == "attacks.tamper_messages"
