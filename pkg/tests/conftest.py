from __future__ import annotations

import os
import sys
from pathlib import Path

from hypothesis import settings

SRC_DIR = Path(__file__).resolve().parents[1] / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

# Property tests must replay identically on CI; local runs keep random search.
settings.register_profile("ci", derandomize=True, print_blob=True)
settings.load_profile("ci" if os.environ.get("CI") else "default")
