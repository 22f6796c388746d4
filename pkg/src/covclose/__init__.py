"""Agentic coverage closure with per-category token accounting."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def fixture_dir(name: str = "handshake") -> Path:
    """Directory of a bundled fixture (config, manifest, spec, LLM script)."""
    return Path(str(resources.files(__package__) / "fixtures" / name))
