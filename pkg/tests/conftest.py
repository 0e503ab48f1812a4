import numpy as np
import pytest

from cdnet.data import DataConfig, gen_dataset
from cdnet.numerics import kernels

BACKENDS = ["python"] + (["compiled"] if kernels.compiled is not None else [])


@pytest.fixture(scope="session")
def small_ds():
    cfg = DataConfig(n_base=7, n_domains=3, n_novel=6, raw_dim=12, per_class=40)
    return gen_dataset(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _acceptance_lines(config) -> list:
    if not hasattr(config, "_acceptance_lines"):
        config._acceptance_lines = []
    return config._acceptance_lines


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = _acceptance_lines(request.config)

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = _acceptance_lines(config)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
