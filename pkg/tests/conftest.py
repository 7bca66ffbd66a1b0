import numpy as np
import pytest

from flexpose.generator import GeneratorConfig, init_generator
from flexpose.pose import SkeletonTopology, default_topology

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

# seconds spent in unit and property tests (everything outside the acceptance module)
_SUITE = {"seconds": 0.0}
SUITE_BUDGET = 15 * 60


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        _SUITE["seconds"] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    if 9 in ACCEPTANCE:
        ok, detail = ACCEPTANCE[9]
        secs = _SUITE["seconds"]
        ACCEPTANCE[9] = (ok and secs < SUITE_BUDGET, f"{detail}; unit+property suite {secs:.1f}s")
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def topo():
    return default_topology()


@pytest.fixture
def chain5():
    """Five joints: a-b-c and a-d-e."""
    return SkeletonTopology(
        tuple("abcde"),
        ((0, 1), (1, 2), (0, 3), (3, 4)),
        0,
        ((255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)),
    )


@pytest.fixture
def tiny_config():
    return GeneratorConfig(d_z=8, d_w=8, n_layers=4, d_h=8, m=5, res=8)


@pytest.fixture
def small_config():
    return GeneratorConfig(d_z=16, d_w=16, n_layers=8, d_h=16, m=13, res=8)


@pytest.fixture
def small_gen(small_config):
    return init_generator(small_config, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
