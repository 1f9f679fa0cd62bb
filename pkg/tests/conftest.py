import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from diffsurrogate.dataset import DatasetManifest, build_dataset, split_train_test
from diffsurrogate.lattice import LatticeSpec

DESK_SEED = 7


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def desk_manifest():
    return DatasetManifest(seed=DESK_SEED, lattice=LatticeSpec(64),
                           counts={n: 400 for n in range(1, 6)})


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory, desk_manifest):
    out = tmp_path_factory.mktemp("desk")
    build_dataset(desk_manifest, out)
    return out


@pytest.fixture(scope="session")
def desk_data(desk_dir):
    from diffsurrogate.dataset import load_dataset
    return load_dataset(desk_dir)


@pytest.fixture(scope="session")
def desk_split(desk_data):
    ds, manifest = desk_data
    return split_train_test(ds, manifest.split_fraction, manifest.seed)


@pytest.fixture(scope="session")
def small_data():
    """L=64, 12 samples for each n in 1..3."""
    m = DatasetManifest(seed=3, lattice=LatticeSpec(64), counts={1: 12, 2: 12, 3: 12})
    ds, _ = build_dataset(m)
    return ds, m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


DESK_TRAIN = dict(epochs=20, lr=1e-4, batch_size=8, seed=1)


@pytest.fixture(scope="session")
def desk_model(desk_split):
    """Exp-MAE desk model: L=64, width 1/8, 20 epochs, batch 8 (about four minutes)."""
    from diffsurrogate.losses import LossSpec
    from diffsurrogate.network import NetConfig
    from diffsurrogate.trainer import TrainConfig, train
    train_set, test_set = desk_split
    cfg = TrainConfig(LossSpec("mae", "exp"), NetConfig(64, 0.125), **DESK_TRAIN)
    return cfg, train(cfg, train_set, test_set)


ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record the verdict of one acceptance criterion for the summary table."""
    num = request.node.get_closest_marker("criterion").args[0]
    notes = []
    yield notes
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    ACCEPTANCE[num] = ("PASS" if ok else "FAIL", "; ".join(notes))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {detail}")
