import pytest

from mcls.rng import RunRng

# criterion id -> (passed, detail); filled by the acceptance modules.
REPORT: dict = {}


def record(key, passed, detail):
    REPORT[key] = (bool(passed), detail)
    print(f"[{key}] {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture
def rng():
    return RunRng.from_seed(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or experiment test")


def pytest_collection_modifyitems(items):
    # Anything driven by a full multi-run experiment.
    for item in items:
        if "p1" in getattr(item, "fixturenames", ()) or "supplementary" in item.nodeid:
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        head, _, tail = key.partition(" ")
        return (head, int(tail) if tail.isdigit() else 0, key)

    for key in sorted(REPORT, key=order):
        passed, detail = REPORT[key]
        terminalreporter.write_line(f"{key:<16} {'PASS' if passed else 'FAIL'}  {detail}")
