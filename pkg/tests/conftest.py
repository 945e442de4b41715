import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance outcome; ``criterion(n, title)`` returns a dict for details."""
    store = request.config.stash[CRITERIA]
    entries = []

    def open_(num, title):
        entry = {"num": num, "title": title, "detail": ""}
        entries.append(entry)
        return entry

    yield open_
    failed = request.node.stash.get(_FAILED, False)
    for e in entries:
        store[e["num"]] = ("FAIL" if failed else "PASS", e["title"], e["detail"])


_FAILED = pytest.StashKey[bool]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and rep.failed:
        item.stash[_FAILED] = True


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(store):
        status, title, detail = store[num]
        line = f"[{status}] criterion {num}: {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
