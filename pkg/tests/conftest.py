import pytest

from suptlab.backbone import GinConfig
from suptlab.graph import split_dataset, synth_motif_dataset
from suptlab.pretrain import PretrainConfig, pretrain_run


@pytest.fixture(scope="session")
def small_ds():
    return synth_motif_dataset(0, num_graphs=60, n_range=(8, 12))


@pytest.fixture(scope="session")
def small_split(small_ds):
    return split_dataset(small_ds, (0.6, 0.2, 0.2), seed=0)


@pytest.fixture(scope="session")
def small_ck(small_ds):
    gin = GinConfig(input_dim=small_ds.feature_dim, num_layers=2, hidden_dim=16)
    return pretrain_run(PretrainConfig(epochs=10, lr=5e-3), small_ds, gin)


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""

    def record(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
