import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lle2c.config import RunConfig  # noqa: E402
from lle2c.dataset import generate_dataset  # noqa: E402

TINY = {
    "seed": 3,
    "reservoir": {
        "grid": [24, 24],
        "permeability": {"seed": 1, "corr_len": 4.0},
        "wells": [
            {"kind": "injector", "i": 4, "j": 4, "value": 5.0},
            {"kind": "producer", "i": 19, "j": 19, "value": 2000.0},
            {"kind": "producer", "i": 4, "j": 19, "value": 2000.0},
        ],
    },
    "data": {"n_samples": 4, "T": 4, "control_interval": 1},
    "model": {"core": [8, 8], "halo": 4, "n_z": 4, "channels": [2, 2, 2, 2], "trans_hidden": 4},
    "train": {"epochs": 2, "batch_size": 8, "sectors_per_sample": 2},
}


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    d = tiny_config.data
    return generate_dataset(tiny_config.reservoir(), d["n_samples"], d["T"], tiny_config.seed, d["dt_days"],
                            d["control_interval"], out_dir=out)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_saved")
    tiny_dataset.save(out)
    return out


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
