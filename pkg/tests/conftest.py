import pytest

from hawkesmfg.model import default_params

# criterion id -> list of (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))


@pytest.fixture(scope="session")
def defaults():
    return default_params()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        results = ACCEPTANCE[k]
        ok = all(p for p, _ in results)
        detail = "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
