"""Shared pytest hooks: print one pass/fail line per acceptance criterion."""


def pytest_terminal_summary(terminalreporter):
    results = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" in rep.nodeid and rep.when == "call":
                results.append((rep.nodeid.split("::")[-1], outcome == "passed"))
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
