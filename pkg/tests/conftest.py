import pytest

from latentlab.harness.probe import train_probe

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def probe():
    """A short probe fit; it still clears the accuracy gate on the shapes data."""
    return train_probe(seed=0, steps=300)


@pytest.fixture
def report(capsys):
    """``report(label, ok, detail)`` prints one PASS/FAIL line and returns ``ok``."""

    def emit(label: str, ok: bool, detail: str = "", status: str | None = None) -> bool:
        line = f"[acceptance] {label}: {status or ('PASS' if ok else 'FAIL')}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
