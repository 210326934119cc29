from criteria import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        status, title, details = RESULTS[n]
        extra = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"CRITERION {n}: {status} - {title}{extra}")
