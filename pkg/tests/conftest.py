import math
import random

import pytest

from rail.geometry import Pose6D


def random_pose(rng: random.Random) -> Pose6D:
    q = [rng.gauss(0.0, 1.0) for _ in range(4)]
    n = math.sqrt(sum(v * v for v in q))
    while n < 1e-3:
        q = [rng.gauss(0.0, 1.0) for _ in range(4)]
        n = math.sqrt(sum(v * v for v in q))
    t = tuple(rng.uniform(-10.0, 10.0) for _ in range(3))
    return Pose6D(t=t, q=tuple(v / n for v in q))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20260809)
