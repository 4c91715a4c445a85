import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    entries = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status == "passed":
                continue
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" in nodeid:
                entries.append((nodeid.split("::")[-1], status))
    if not entries:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in sorted(set(entries)):
        word = "PASS" if status == "passed" else "FAIL"
        terminalreporter.write_line(f"{word} {name}")
