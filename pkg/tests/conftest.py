import pytest
import torch

from rssa.config import load_config
from rssa.data import generate_toy_source_dataset
from rssa.train import pretrain_source, set_single_thread

set_single_thread()

# small enough for unit tests; the real defaults are exercised by the acceptance suite
TINY = [
    "pretrain.min_images=16",
    "pretrain.batch_size=4",
    "pretrain.log_every=5",
    "adapt.inversion_steps=5",
    "adapt.inversion_mean_samples=64",
    "adapt.scs_every=0",
    "adapt.checkpoint_every=1000",
]


def tiny_config(*extra):
    return load_config(None, TINY + list(extra))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_toy_source_dataset(root / "source", 32, seed=0)
    generate_toy_source_dataset(root / "targets", 10, seed=1000, style="palette")
    return root


@pytest.fixture(scope="session")
def tiny_source(tiny_data, tmp_path_factory):
    path = tmp_path_factory.mktemp("source") / "source.ckpt"
    torch.manual_seed(0)
    return pretrain_source(tiny_config(), tiny_data / "source", path, iterations=12)


_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, results: list, name: str, label: str):
        self.results, self.name, self.label = results, name, label
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"{self.name} {status}  {self.label}" + (f"  [{detail}]" if detail else "")
        self.results.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion("AC-n", "label") as c:`` records one pass/fail line for the run summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda name, label: _Criterion(results, name, label)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
