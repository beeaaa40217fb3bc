import pytest

# criterion -> list of (check, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def record():
    def _record(criterion, check, passed, detail):
        ACCEPTANCE.setdefault(criterion, []).append((check, bool(passed), detail))
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[crit]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({detail})" for name, ok, detail in checks)
        terminalreporter.write_line(f"criterion {crit:2d}: {verdict} | {parts}")
