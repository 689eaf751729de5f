import os

import pytest

from ditrt.harness import calibrate, parse_config, run_single
from ditrt.schedule import Toggles

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

# Populated by the acceptance tests; printed in the terminal summary so each
# criterion gets one visible pass/fail line.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, desc = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(
            f"criterion {n}: {'PASS' if ok else 'FAIL'} - {desc}"
        )


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def default_cfg():
    """The benchmark configuration used for the acceptance runs."""
    return parse_config({"seed": 7})


@pytest.fixture(scope="session")
def default_calib(default_cfg):
    return calibrate(default_cfg)


@pytest.fixture(scope="session")
def baseline_default(default_cfg):
    """Full-precision run of the default config (all toggles off)."""
    return run_single(default_cfg, Toggles())


def small_config(**overrides):
    """A config small enough for fast per-test runs."""
    obj = {
        "seed": 3,
        "model": {
            "num_blocks": 3, "model_dim": 16, "num_heads": 2,
            "tokens_per_frame": 4, "frames": 2, "cond_dim": 8,
        },
        "schedule": {"steps": 10},
    }
    obj.update(overrides)
    return parse_config(obj)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_calib(small_cfg):
    return calibrate(small_cfg)
