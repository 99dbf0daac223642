"""Shared acceptance registry: one PASS/FAIL line per criterion at session end."""

ACCEPTANCE = {}


def record(name, passed, detail=""):
    ACCEPTANCE[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
