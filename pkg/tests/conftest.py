import numpy as np
import pytest

from difflab.core import make_dataset
from difflab.schedule import Schedule


@pytest.fixture
def two_atoms():
    return make_dataset("two-point", 2, a=-1.0, b=1.0)


@pytest.fixture
def ve():
    return Schedule("ve", sigma_q=1.0)

