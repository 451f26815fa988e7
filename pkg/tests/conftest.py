import pytest

from surfelight.fixtures import make_fixture


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The shipped synthetic dataset, generated once per test session."""
    return make_fixture(tmp_path_factory.mktemp("fixture"))


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Log one acceptance line; printed in the terminal summary."""

    def _record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
