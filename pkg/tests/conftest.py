def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import _verdicts

    if _verdicts.LINES:
        terminalreporter.section("acceptance checks")
        for line in _verdicts.LINES:
            terminalreporter.write_line(line)
