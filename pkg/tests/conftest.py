import numpy as np
import pytest

from ecgtrans.fem import field_from_function
from ecgtrans.mesh import generate_annulus, generate_disk


def theta(x, y):
    return np.arctan2(y, x)


def cos_field(mesh, tag, amp=1.0, m=1):
    return field_from_function(mesh, lambda x, y: amp * np.cos(m * theta(x, y)), tag)


@pytest.fixture(scope="session")
def disk01():
    return generate_disk(1.0, 0.1)


@pytest.fixture(scope="session")
def disk005():
    return generate_disk(1.0, 0.05)


@pytest.fixture(scope="session")
def annulus01():
    return generate_annulus(1.0, 2.0, 0.1)


@pytest.fixture(scope="session")
def annulus005():
    return generate_annulus(1.0, 2.0, 0.05)
