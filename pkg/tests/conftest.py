"""Shared fixtures and the acceptance summary hook.

Acceptance tests record one verdict per criterion through the
``criterion_recorder`` fixture; the terminal summary prints one PASS/FAIL
line for each recorded criterion after the normal pytest output.
"""

import os

import pytest

from tisskit.protocol import generate_toy_dataset

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def _record(index: int, name: str, passed: bool, detail: str = "") -> None:
    _CRITERIA[index] = (name, bool(passed), detail)


@pytest.fixture
def criterion_recorder():
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for index in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[index]
        verdict = "PASS" if passed else "FAIL"
        line = f"[{verdict}] criterion {index}: {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cache_env(tmp_path_factory):
    """Point the CLI cache at a session-scoped temp dir."""
    cache = tmp_path_factory.mktemp("cache")
    old = os.environ.get("TISS_KIT_CACHE")
    os.environ["TISS_KIT_CACHE"] = str(cache)
    yield cache
    if old is None:
        os.environ.pop("TISS_KIT_CACHE", None)
    else:
        os.environ["TISS_KIT_CACHE"] = old


@pytest.fixture(scope="session")
def train_corpus(tmp_path_factory):
    """100-image 4-class training corpus used by the experiment tests."""
    root = tmp_path_factory.mktemp("data") / "train100"
    generate_toy_dataset(root, n_images=100, image_size=64, n_classes=4, seed=0)
    return root


@pytest.fixture(scope="session")
def val_corpus(tmp_path_factory):
    """Held-out 60-image corpus drawn with a different seed."""
    root = tmp_path_factory.mktemp("valdata") / "val60"
    generate_toy_dataset(root, n_images=60, image_size=64, n_classes=4, seed=999)
    return root
