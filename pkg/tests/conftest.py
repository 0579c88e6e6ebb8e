import numpy as np
import pytest

from app import database


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    """Point the run ledger at a fresh SQLite file."""
    path = tmp_path / "runs.db"
    monkeypatch.setattr(database, "DB_PATH", str(path))
    return path


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "out"
    path.mkdir()
    return path
