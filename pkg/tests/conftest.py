import pytest

from bilevel_mpc.formulations import toy_instance


@pytest.fixture(scope="session")
def toy():
    return toy_instance()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
