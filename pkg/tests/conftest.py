import numpy as np
import pytest
from hypothesis import settings

from evomoe.taskgen import generate_stream
from evomoe.trainer import TrainConfig, run_stream

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_stream():
    return generate_stream(num_tasks=3, classes_per_task=4, samples_per_class=60, seed=7)


@pytest.fixture(scope="session")
def small_run(small_stream):
    return run_stream(small_stream, TrainConfig(max_iters=120, batch_size=32, interval=20))


@pytest.fixture(scope="session")
def default_stream():
    return generate_stream(seed=0)


@pytest.fixture(scope="session")
def default_run(default_stream):
    return run_stream(default_stream, TrainConfig())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
