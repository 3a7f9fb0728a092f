import numpy as np
import pytest
import torch

from dabench.synth import DEFAULT_DOMAINS, build_benchmark

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_benchmark(tmp_path_factory):
    """Two-domain phantom benchmark, 5 cases per domain at 32x32x16."""
    out = tmp_path_factory.mktemp("bench")
    domains = (DEFAULT_DOMAINS[0], DEFAULT_DOMAINS[2])
    return build_benchmark(domains, cases_per_domain=5, shape=(32, 32, 16), spacing=(1.0, 1.0, 1.0),
                           seed=5, out_dir=out)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
