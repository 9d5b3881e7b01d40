import pytest

from poroeg.acceptance import RunCache


@pytest.fixture(scope="session")
def acceptance_cache():
    return RunCache()


@pytest.fixture(scope="session")
def acceptance_lines(pytestconfig):
    lines = []
    pytestconfig._poroeg_acceptance = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_poroeg_acceptance", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
