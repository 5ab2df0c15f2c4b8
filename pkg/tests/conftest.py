"""Shared fixtures: cached desk-scale artifacts and acceptance reporting.

Heavy artifacts (datasets, GT tables, checkpoints, samples) are deterministic
functions of their configuration, so they are cached on disk under
``.cache/artifacts`` keyed by a hash of the exact build recipe.  Delete the
directory (or set TRAJDIFF_TEST_CACHE=off) to force a rebuild.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache" / "artifacts"

_ACCEPTANCE_RESULTS = []


def record_acceptance(number: int, name: str, passed: bool, detail: str = ""):
    _ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} ({name}): {status}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


def cache_enabled() -> bool:
    return os.environ.get("TRAJDIFF_TEST_CACHE", "on") != "off"


def cache_path(tag: str, recipe: dict, suffix: str) -> Path:
    key = hashlib.sha256(
        json.dumps(recipe, sort_keys=True).encode()
    ).hexdigest()[:16]
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    return CACHE_DIR / f"{tag}-{key}{suffix}"


@pytest.fixture(scope="session")
def global_rng():
    return np.random.default_rng(12345)
