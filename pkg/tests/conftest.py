from hypothesis import HealthCheck, settings

settings.register_profile("fdna", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fdna")


def pytest_terminal_summary(terminalreporter):
    from tests_support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
