import pytest
import torch

from ugmae.graph import Graph, undirected


def random_graph(n=8, p=0.4, d=5, seed=0, dtype=torch.float64, labels=False):
    g = torch.Generator().manual_seed(seed)
    iu = torch.triu_indices(n, n, 1).T
    keep = torch.rand(iu.shape[0], generator=g) < p
    x = torch.randn(n, d, generator=g, dtype=dtype)
    y = torch.randint(0, 2, (n,), generator=g) if labels else None
    return undirected(n, iu[keep], x, y)


@pytest.fixture
def small_graph():
    return random_graph()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


_CRITERIA: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        _CRITERIA.append(f"{status}  criterion {marker.args[0]:<3} {marker.args[1]}: {detail}".rstrip(": "))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
