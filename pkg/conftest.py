from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments (set EGPG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("EGPG_RUN_SLOW", "").strip() in ("1", "true", "yes"):
        return
    skip = pytest.mark.skip(reason="slow; set EGPG_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
