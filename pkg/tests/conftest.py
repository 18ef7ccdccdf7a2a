import time
from pathlib import Path

import pytest

import ocifixture
from flatcache.builder import BuildOptions, Builder
from flatcache.layers import DownloadCache, LayoutSource
from flatcache.store import Store


@pytest.fixture
def layout(tmp_path) -> Path:
    root = tmp_path / "layout"
    ocifixture.alpine_like(root)
    return root


@pytest.fixture
def store(tmp_path) -> Store:
    return Store.init(tmp_path / "storage")


@pytest.fixture
def builder(store, layout) -> Builder:
    return Builder(store, LayoutSource(layout, DownloadCache(store.dlcache)))


@pytest.fixture
def context(tmp_path) -> Path:
    ctx = tmp_path / "ctx"
    ctx.mkdir()
    return ctx


@pytest.fixture
def build(builder, context):
    """``build(recipe, name, **options)`` returning the BuildReport."""
    def run(recipe, name, **kw):
        kw.setdefault("context_dir", context)
        return builder.build(recipe, name, BuildOptions(**kw))
    return run


# acceptance reporting: one PASS/FAIL line per criterion

_acceptance: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    if report.when == "call":
        entry["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:>2}: {status}  {e['title']} ({e['seconds']:.1f}s)")


@pytest.fixture
def stopwatch():
    class Watch:
        def __enter__(self):
            self.start = time.monotonic()
            return self

        def __exit__(self, *exc):
            self.seconds = time.monotonic() - self.start
    return Watch
