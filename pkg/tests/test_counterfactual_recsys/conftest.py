import logging
import sys
from pathlib import Path

import numpy as np
import pytest

from counterfactual_recsys import reset_logger
from counterfactual_recsys.data import SplitDataset

from .common import random_split

reset_logger()  # so that logs can be captured for testing
logging.basicConfig(format="[%(name)s] [%(levelname)s] %(message)s", level=logging.DEBUG)

log = logging.getLogger(__name__)


log.info("running tests with %s", sys.executable)


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    return tmp_path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_split() -> SplitDataset:
    return random_split(12, 30, 6, seed=0)
