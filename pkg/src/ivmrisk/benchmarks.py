"""Seeded synthetic benchmark sets."""
import numpy as np


def two_blobs(n_per_class, separation=2.0, d=2, seed=0, scale=1.0):
    """Two isotropic Gaussian classes whose means are ``separation`` apart.

    Returns ``(X, y)`` with labels in {0, 1}, classes interleaved by a
    seeded shuffle.
    """
    rng = np.random.default_rng(seed)
    mu = np.zeros(d)
    mu[0] = separation / 2.0
    X = np.vstack([rng.normal(size=(n_per_class, d)) * scale - mu,
                   rng.normal(size=(n_per_class, d)) * scale + mu])
    y = np.repeat([0.0, 1.0], n_per_class)
    order = rng.permutation(2 * n_per_class)
    return X[order], y[order]


def split_half(X, y, seed=0):
    """Random half/half train-test split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    cut = len(y) // 2
    tr, te = order[:cut], order[cut:]
    return X[tr], y[tr], X[te], y[te]
