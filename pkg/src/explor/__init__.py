"""Curiosity-driven web exploration and testing engine."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_app(name: str) -> Path:
    """Path to a bundled sim benchmark config (e.g. ``gated_chain_10.app``)."""
    return Path(resources.files(__package__) / "apps" / name)
