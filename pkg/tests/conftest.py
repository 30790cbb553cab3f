import os

# keep the suite single-process unless asked otherwise
os.environ.setdefault("SRLAB_WORKERS", "1")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number].line())
