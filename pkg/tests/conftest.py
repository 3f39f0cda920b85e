import time
from dataclasses import dataclass

import numpy as np
import pytest

from hjbk.config import load_preset
from hjbk.simulate import SimulationResult, run_batch
from hjbk.synthesis import SynthesisResult, synthesize

_CRITERIA = {}


@dataclass
class Benchmark:
    name: str
    model: object
    config: object
    result: SynthesisResult
    batch: SimulationResult
    synthesis_seconds: float

    @property
    def vf(self):
        return self.result.value_function


def _run_benchmark(name):
    cfg = load_preset(name)
    model = cfg.build_model()
    centers = cfg.build_centers(model)
    t0 = time.perf_counter()
    result = synthesize(model, cfg.build_kernel(model.n), centers, cfg.build_grid(model, centers),
                        cfg.solver.build(), cfg.hessian_relaxation)
    elapsed = time.perf_counter() - t0
    vf = result.value_function
    batch = run_batch(model, vf.control, cfg.build_simulation(model.n), value=vf.value)
    return Benchmark(name, model, cfg, result, batch, elapsed)


@pytest.fixture(scope="session")
def bench_1d():
    return _run_benchmark("poly1d")


@pytest.fixture(scope="session")
def bench_2d():
    return _run_benchmark("radial2d")


@pytest.fixture(scope="session")
def bench_vdp():
    return _run_benchmark("vanderpol")


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  AC{number:02d}  {entry['title']}")
