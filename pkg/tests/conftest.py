import numpy as np
import pytest

from aapl_lab.data import DatasetConfig, generate_dataset, split_base_new
from aapl_lab.encoders import EncoderDims, init_frozen
from aapl_lab.prompt import init_params

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def toy():
    ds = generate_dataset(DatasetConfig())
    return ds, split_base_new(ds, 0), init_frozen(EncoderDims(), 0, ds.classes)


@pytest.fixture(scope="session")
def dataset(toy):
    return toy[0]


@pytest.fixture(scope="session")
def plan(toy):
    return toy[1]


@pytest.fixture(scope="session")
def enc(toy):
    return toy[2]


@pytest.fixture
def params(enc):
    return init_params(enc, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log(request):
    """Append ``(criterion, passed, detail)``; the lines are echoed in the terminal summary."""
    cfg = request.config
    if _ACCEPTANCE not in cfg.stash:
        cfg.stash[_ACCEPTANCE] = []

    def log(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        cfg.stash[_ACCEPTANCE].append((n, line))

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
