import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


@pytest.fixture
def rng():
    return np.random.default_rng(20250809)


@pytest.fixture(scope="session")
def cube_spec():
    from qchlab.lattice import LatticeSpec

    return LatticeSpec((4, 4, 4), 1.0)


@pytest.fixture(scope="session")
def ring_spec():
    from qchlab.lattice import LatticeSpec

    return LatticeSpec((16,), 1.0)
