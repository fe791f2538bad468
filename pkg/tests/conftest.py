import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tim.crypto import CertificateAuthority, Rng  # noqa: E402
from tim.tpm import Tpm  # noqa: E402


@pytest.fixture(scope="session")
def ca():
    return CertificateAuthority(Rng("test-ca"))


@pytest.fixture
def tpm(ca):
    return Tpm(Rng("test-tpm"), ca)


_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, duration = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status} ({duration:.2f}s) {title}")
