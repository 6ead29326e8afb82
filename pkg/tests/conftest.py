def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance_results", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
