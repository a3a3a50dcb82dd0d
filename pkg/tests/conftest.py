import acceptancelog


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptancelog.RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in acceptancelog.RESULTS:
            terminalreporter.write_line(line)
