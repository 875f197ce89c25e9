import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from osborne.harness import InstanceSpec, build_instance  # noqa: E402
from osborne.logmat import from_dense, from_triplets  # noqa: E402


@pytest.fixture
def E1():
    return from_triplets(2, [(0, 1, 4.0), (1, 0, 1.0)])


@pytest.fixture
def E2():
    K = np.zeros((4, 4))
    K[0, 2] = K[1, 3] = 1.0
    return from_dense(K)


def er(n, p=0.2, seed=0, lo=-2.0, hi=2.0):
    return build_instance(InstanceSpec("erdos-renyi", n, p, (lo, hi), seed))[0]


def random_dense(rng, n, density=0.5, diag=True, lo=-3.0, hi=3.0):
    """Random strongly connected nonnegative matrix (a cycle is always present)."""
    K = np.where(rng.random((n, n)) < density, np.exp(rng.uniform(lo, hi, (n, n))), 0.0)
    if not diag:
        np.fill_diagonal(K, 0.0)
    for i in range(n):
        j = (i + 1) % n
        if i != j and K[i, j] == 0:
            K[i, j] = np.exp(rng.uniform(lo, hi))
    if n == 1 and K[0, 0] == 0:
        K[0, 0] = 1.0
    return K
