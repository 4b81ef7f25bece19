import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedunlearn.data import bundle_from_blobs, bundle_from_idx, export_mnist_idx
from fedunlearn.nn import Arch, init_model

settings.register_profile("ci", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def mnist_idx_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mnist_idx")
    export_mnist_idx(out, classes=(0, 1, 2, 3), test_fraction=0.2, seed=0)
    return out


@pytest.fixture(scope="session")
def mnist_bundle(mnist_idx_dir):
    d = mnist_idx_dir
    return bundle_from_idx(
        d / "train-images-idx3-ubyte",
        d / "train-labels-idx1-ubyte",
        d / "test-images-idx3-ubyte",
        d / "test-labels-idx1-ubyte",
    )


@pytest.fixture(scope="session")
def small_blobs():
    # low-dimensional blobs keep federation tests fast
    return bundle_from_blobs(num_classes=4, n=800, dim=16, spread=0.1, test_fraction=0.25, seed=3)


@pytest.fixture
def tiny_model():
    # 3 -> 4 -> 3: 16 + 15 = 31 parameters
    return init_model(Arch(3, (4,), (3,)), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
