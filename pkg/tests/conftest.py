from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def demo_dir() -> Path:
    path = REPO_ROOT / "demo"
    assert (path / "bundle" / "manifest.json").is_file(), "shipped demo bundle missing"
    assert (path / "observations.csv").is_file(), "shipped observation CSV missing"
    return path
