import os
import time

import numpy as np
import pytest

from pqd.cli import run_reproduce
from pqd.config import default_config, from_dict
from pqd.denoiser import TrainConfig, train_denoiser
from pqd.io import load_checkpoint
from pqd.schedule import make_linear_schedule
from pqd.toy import eight_gaussians


PIPELINE_SECONDS = []


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule()


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    """One full default reproduction, shared by everything that needs the trained model."""
    out = str(tmp_path_factory.mktemp("reproduce") / "run")
    start = time.perf_counter()
    run_reproduce(default_config(), out)
    PIPELINE_SECONDS.append(time.perf_counter() - start)
    return out


@pytest.fixture(scope="session")
def trained(pipeline_dir):
    return load_checkpoint(os.path.join(pipeline_dir, "train", "checkpoint.bin"))


@pytest.fixture(scope="session")
def quick_model(sched):
    """A briefly trained unconditional model for fast unit tests."""
    data, _ = eight_gaussians(4000, np.random.default_rng(5))
    return train_denoiser(data, sched, TrainConfig(num_iterations=300, seed=3))


@pytest.fixture(scope="session")
def quick_cond_model(sched):
    data, labels = eight_gaussians(4000, np.random.default_rng(6))
    return train_denoiser(data, sched, TrainConfig(num_iterations=300, seed=4), labels % 2, num_classes=2)


def small_config(**sections):
    """A config small enough for CLI round trips in a few seconds."""
    raw = {
        "data": {"num_train": 2000, "num_heldout": 500},
        "train": {"num_iterations": 200},
        "calibration": {"N": 64, "num_inference_steps": 25},
        "eval": {"n_samples": 200, "n_reference": 200, "n_projections": 32, "num_inference_steps": 25},
    }
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    return from_dict(raw)


_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the outcome is filled in after the test runs."""
    def record(number, title):
        _ACCEPTANCE[request.node.nodeid] = [str(number), title, "FAIL", ""]
        return lambda detail: _ACCEPTANCE[request.node.nodeid].__setitem__(3, detail)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    row = _ACCEPTANCE.get(item.nodeid)
    if row is not None and rep.when == "call":
        row[2] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_ACCEPTANCE.values()):
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
