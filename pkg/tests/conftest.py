import json

import pytest

# A scene small enough that the whole CLI pipeline runs in seconds.
TINY = {
    "seed": 3,
    "data": {"n_contrastive": 120, "n_downstream": 60, "n_test": 20},
    "scene": {"area": [0.0, 20.0, 0.0, 20.0]},
    "contrastive": {"epochs": 2, "batch_size": 32},
    "downstream": {"epochs": 2},
    "joint": {"epochs": 2},
    "sweep": {"snr_db": [10.0, 20.0], "labels": [30, 60], "pilot_len": [16, 24], "map_cells": 4},
    "similarity": {"n_samples": 120, "pairs_per_bin": 20},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


# One line per acceptance criterion, printed after the run whether or not it passed.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
