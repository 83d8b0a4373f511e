from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from explor import bundled_app

# Property tests must behave identically run to run; the engine's own
# determinism guarantees are part of what this suite certifies.
settings.register_profile("ci", derandomize=True)
settings.load_profile("ci")

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def gated_app() -> str:
    return str(bundled_app("gated_chain_10.app"))


@pytest.fixture(scope="session")
def deep_app() -> str:
    return str(bundled_app("deep_path_6x5.app"))


@pytest.fixture(scope="session")
def dynamic_app() -> str:
    return str(bundled_app("dynamic_table.app"))


@pytest.fixture(scope="session")
def faulty_app() -> str:
    return str(DATA_DIR / "faulty_demo.app")
