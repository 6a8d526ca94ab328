import numpy as np
import pytest

from morelike import generator as gn
from morelike import semantic as sm


@pytest.fixture
def tiny_cfg():
    return gn.GenConfig(
        image_size=8,
        n_z=8,
        h=8,
        p=2,
        read_channels=(4, 8),
        write_channels=(16, 8),
        disc_channels=(4, 8, 16),
    )


@pytest.fixture
def desk_cfg():
    return gn.GenConfig()


def random_constraint_set(rng, n, size=8, dtype=np.float32):
    cons = [
        sm.Constraint(
            rng.uniform(-1, 1, (3, size, size)).astype(dtype),
            rng.uniform(-1, 1, (3, size, size)).astype(dtype),
        )
        for _ in range(n)
    ]
    return sm.ConstraintSet(cons)
