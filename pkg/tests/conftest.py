import pytest

from stageflow.runtime import RuntimeOptions, init_runtime


@pytest.fixture(autouse=True)
def fresh_runtime():
    """Isolate every test: fresh devices, registry, counters, RNG, contexts."""
    init_runtime(RuntimeOptions())
    yield


@pytest.fixture
def accel_runtime():
    """A runtime with one simulated accelerator."""
    return init_runtime(RuntimeOptions(accelerators=1))
