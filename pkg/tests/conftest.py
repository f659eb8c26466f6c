import pytest

import devmat as dm


@pytest.fixture(autouse=True)
def hermetic_runtime(tmp_path, monkeypatch):
    """Isolate the kernel cache per test and tear the runtime down after."""
    monkeypatch.setenv("KERNEL_CACHE_DIR", str(tmp_path / "kernel-cache"))
    monkeypatch.delenv("DEFAULT_BACKEND", raising=False)
    monkeypatch.delenv("RNG_SEED", raising=False)
    yield
    dm.shutdown()


@pytest.fixture
def ref_backend():
    dm.init("reference")
    return dm


@pytest.fixture
def par_backend():
    dm.init("parallel", worker_count=2)
    return dm
