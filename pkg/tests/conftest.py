import numpy as np
import pytest

from calspec.core import RngStream
from calspec.models import TableModel

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, ("PASS", title))[0]
    status = "PASS" if rep.passed and prev == "PASS" else "FAIL"
    if rep.when == "setup" and rep.passed:
        return
    _CRITERIA[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}")


class ScriptedRng(RngStream):
    """Returns the given uniforms in order, then fails loudly."""

    def __init__(self, values):
        super().__init__(0)
        self.values = list(values)

    def uniform(self):
        if not self.values:
            raise AssertionError("scripted rng exhausted")
        self.draws += 1
        return self.values.pop(0)


def random_table_pair(vocab=4, window=1, seed=0, scale=1.5):
    """Draft/target TableModels with independent random rows for every window."""
    gen = np.random.default_rng(seed)
    import itertools
    keys = list(itertools.product(range(vocab), repeat=window))

    def model():
        rows = {k: gen.normal(scale=scale, size=vocab) for k in keys}
        return TableModel(vocab, window, rows, gen.normal(size=vocab))

    return model(), model()


@pytest.fixture
def table_pair():
    return random_table_pair()


@pytest.fixture(scope="session")
def small_fixture():
    from calspec.synthetic import divergence_fixture
    return divergence_fixture(n_calibration=60, n_eval=20, n_train_docs=300)
