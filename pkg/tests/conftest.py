import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from overlaysim.config import parse_config  # noqa: E402

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "overlaysim" / "configs"


def make_config(**overrides):
    data = {"modes": ["host_overlay"], "pairs": [1], "duration_ticks": 2000, "warmup_ticks": 100}
    data.update(overrides)
    return parse_config(data, environ={})


@pytest.fixture
def config_dir():
    return CONFIG_DIR
