import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
sys.path.insert(0, str(Path(__file__).resolve().parent))

CRITERIA = {
    1: "gradient fidelity",
    2: "activation contract",
    3: "dense start",
    4: "lambda sensitivity",
    5: "budget exactness",
    6: "threshold robustness",
    7: "bimodality",
    8: "extraction equivalence",
    9: "refinement bounds",
    10: "oracle quality",
    11: "determinism",
    12: "flops accounting",
}

_results: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _results.setdefault(mark.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        outs = _results.get(n)
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        elif any(o == "failed" for o in outs):
            status = "FAIL"
        else:
            status = "SKIPPED"
        tr.write_line(f"criterion {n:>2} {name:<24} {status}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _float64():
    from paam.tensor import set_default_dtype

    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS
