import numpy as np
import pytest

from uncertain_ann.core import split_leave_one_out
from uncertain_ann.eval.synthetic import SyntheticSpec, generate_synthetic
from uncertain_ann.swing import compute_swing
from uncertain_ann.trainer import ModelConfig, train


@pytest.fixture(scope="session")
def two_cluster():
    """Trained model on separable 2-cluster data: (data, train_log, truth, model)."""
    spec = SyntheticSpec(num_users=200, num_items=200, num_categories=4, num_clusters=2, home_weight=0.95, seed=1)
    data = generate_synthetic(spec)
    train_log, truth = split_leave_one_out(data.log)
    model = train(train_log, compute_swing(train_log), ModelConfig(epochs=10, seed=1), item_ids=range(200))
    return data, train_log, truth, model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(number, name, ok, detail)`` records a line for the acceptance summary and asserts."""
    def record(number, name, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
