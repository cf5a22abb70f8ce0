import pytest

_RESULTS = {}


class CriterionLog:
    """Collects one status line per acceptance criterion."""

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.checks = []

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def ok(self):
        return all(ok for _, ok, _ in self.checks)

    def failed(self):
        return [f"{n}: {d}" for n, ok, d in self.checks if not ok]


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    # parametrized criteria share one log
    yield _RESULTS.setdefault(number, CriterionLog(number, title))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker and call.when == "call" and call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        log = _RESULTS.get(marker.args[0])
        if log is not None:
            log.skipped = str(call.excinfo.value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        log = _RESULTS[number]
        if getattr(log, "skipped", None):
            tr.write_line(f"criterion {number} [{log.title}]: SKIPPED ({log.skipped})")
            continue
        status = "PASS" if log.ok and log.checks else "FAIL"
        tr.write_line(f"criterion {number} [{log.title}]: {status}")
        for name, ok, detail in log.checks:
            tr.write_line(f"    {'ok ' if ok else 'BAD'} {name}: {detail}")
