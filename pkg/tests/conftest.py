import helpers


def pytest_terminal_summary(terminalreporter):
    results = helpers.ACCEPTANCE
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, seconds, detail = results[number]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number} {verdict} [{seconds:.1f}s] {title}: {detail}")
