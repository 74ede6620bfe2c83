import pytest

# (number, passed, description) collected by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(number, passed, text):
        ACCEPTANCE.append((number, bool(passed), text))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, text in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {text}")
