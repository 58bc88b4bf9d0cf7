import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report as ar
    ran = any("test_acceptance" in i.nodeid
              for key in ("passed", "failed", "error")
              for i in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ar.CRITERIA):
        terminalreporter.write_line(ar.format_line(n))
