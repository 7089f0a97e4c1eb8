import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bookgraph.features import build_features  # noqa: E402
from bookgraph.ingest import SplitSpec, split_interactions  # noqa: E402
from bookgraph.synthetic import make_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic(n_users=60, n_books=80, n_authors=15, n_categories=5, n_publishers=6, seed=7)


@pytest.fixture(scope="session")
def small_split(small_data):
    return split_interactions(small_data.interactions, SplitSpec(seed=1))


@pytest.fixture(scope="session")
def small_features(small_data):
    return build_features(small_data.graph, text_dim=32)


# acceptance criteria report one PASS/FAIL/SKIP line each at the end of the run
_marked: dict[str, tuple[int, str]] = {}
_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _marked[item.nodeid] = m.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _marked:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n, title = _marked[report.nodeid]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria[n] = (status, title, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, secs = _criteria[n]
        terminalreporter.write_line(f"{status} {n:>2}  {title}  ({secs:.1f}s)")
