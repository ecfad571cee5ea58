import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import PhysicalParams, TWAConfig  # noqa: E402


@pytest.fixture
def physical():
    return PhysicalParams(g0=1.0, kappa=1.0, gamma=0.1, delta_cavity=1000.0, F=4.5, N=100)


@pytest.fixture
def small_twa():
    """Four-level ensemble small enough for every default test run."""
    def make(n_traj=400, t_grid=(0.0,), **extra):
        return TWAConfig(n_traj=n_traj, t_grid=tuple(t_grid), model=extra.pop("model", "four_level"),
                         seed=extra.pop("seed", 1234), batch_size=extra.pop("batch_size", 100), **extra)
    return make


@pytest.fixture
def run_config_text(tmp_path):
    """Writes a JSON run config into tmp_path and returns its path."""
    def write(text: str, name: str = "config.json") -> str:
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write
