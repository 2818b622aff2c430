import numpy as np


def random_generator(k, rng):
    """Dense generator with off-diagonal rates in [0.2, 2)."""
    Q = rng.uniform(0.2, 2.0, (k, k))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q
