import asyncio

import pytest
from hypothesis import settings

from gyokuro.core import AttestationAuthority, KeyRegistry, generate_key
from gyokuro.database import DatabaseHost
from gyokuro.tee import LocalDatabaseLink, Tee, TeeConfig

settings.register_profile("default", deadline=None)
settings.load_profile("default")

MEASUREMENT = bytes(range(32))


def run(coro):
    return asyncio.run(coro)


class Keys:
    """One trusted setup: authority, one source and one monitor."""

    def __init__(self):
        self.authority = AttestationAuthority()
        self.source = generate_key()
        self.monitor = generate_key()

    def registry(self):
        return KeyRegistry(
            apk=self.authority.apk,
            expected_measurement=MEASUREMENT,
            data_source_keys={"src": self.source.public_key()},
            monitor_keys={"mon": self.monitor.public_key()},
        )

    def tee(self, **config):
        config.setdefault("flush_timeout", None)
        return Tee(self.registry(), self.authority, MEASUREMENT, TeeConfig(**config), keep_export_log=True)

    def wired_tee(self, db=None, **config):
        tee = self.tee(**config)
        db = db or DatabaseHost()
        tee.link = LocalDatabaseLink(db, tee)
        return tee, db


@pytest.fixture(scope="session")
def keys():
    return Keys()


# One line per acceptance criterion, collected by tests/test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
