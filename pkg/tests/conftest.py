import numpy as np
import pytest
import torch

from dualsr.data import make_pair

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pairs():
    """Four random 64x64 HR images at scale 4 (16x16 LR)."""
    g = np.random.default_rng(7)
    return [make_pair(g.random((64, 64, 3), dtype=np.float32), 4, f"img{i}") for i in range(4)]


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    from dualsr.data import make_desk_dataset
    return make_desk_dataset(tmp_path_factory.mktemp("desk"), n_train=8, n_val=2,
                             train_size=96, val_size=64)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
