import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stepstone.addrmap import load_builtin  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    return load_builtin("toy_r4")


@pytest.fixture(scope="session")
def skl():
    return load_builtin("skl_ddr4")
