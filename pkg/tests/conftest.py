from typing import Generator

import numpy as np
import pytest
from testfixtures import TempDirectory

from pqf_bench.linalg import Unitary, haar_random_unitary


@pytest.fixture
def temp_dir() -> Generator[TempDirectory, None, None]:
    with TempDirectory() as temp_dir:
        yield temp_dir


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def unitary() -> Unitary:
    return haar_random_unitary(5, 11)
