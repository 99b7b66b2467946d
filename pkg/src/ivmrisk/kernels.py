"""Kernel functions and Gram matrices shared by the KLR, IVM and SVM learners.

The radial kernel is parameterized by ``gamma``::

    K(x, z) = exp(-gamma * ||x - z||^2)

A width ``sigma`` in the Gaussian form ``exp(-||x - z||^2 / (2 sigma^2))``
maps to ``gamma = 1 / (2 sigma^2)``; see :meth:`KernelSpec.from_sigma`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

LINEAR = "linear"
RADIAL = "radial"
FAMILIES = (LINEAR, RADIAL)


class KernelError(ValueError):
    """Invalid kernel parameters or incompatible inputs."""


@dataclass(frozen=True)
class KernelSpec:
    family: str = RADIAL
    gamma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if self.family == RADIAL:
            g = float(self.gamma)
            if not (math.isfinite(g) and g > 0):
                raise KernelError(f"radial kernel needs gamma > 0, got {self.gamma!r}")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(LINEAR, 1.0)

    @classmethod
    def radial(cls, gamma: float) -> "KernelSpec":
        return cls(RADIAL, float(gamma))

    @classmethod
    def from_sigma(cls, sigma: float) -> "KernelSpec":
        """Radial kernel from a Gaussian width, ``gamma = 1 / (2 sigma^2)``."""
        sigma = float(sigma)
        if not (math.isfinite(sigma) and sigma > 0):
            raise KernelError(f"sigma must be positive, got {sigma!r}")
        return cls(RADIAL, 1.0 / (2.0 * sigma * sigma))

    @property
    def sigma(self) -> float:
        if self.family != RADIAL:
            raise KernelError("sigma is only defined for the radial kernel")
        return math.sqrt(1.0 / (2.0 * self.gamma))

    def __call__(self, x, z) -> float:
        return kernel_eval(self, x, z)


def _as_vector(x, name):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise KernelError(f"{name} must be a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise KernelError(f"{name} contains non-finite entries")
    return v


def _as_matrix(x, name):
    m = np.asarray(x, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise KernelError(f"{name} must be 2-d, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise KernelError(f"{name} is empty (shape {m.shape})")
    if not np.all(np.isfinite(m)):
        raise KernelError(f"{name} contains non-finite entries")
    return m


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = _as_vector(x, "x")
    z = _as_vector(z, "z")
    if x.size != z.size:
        raise KernelError(f"dimension mismatch: len(x)={x.size}, len(z)={z.size}")
    if spec.family == LINEAR:
        return float(np.dot(x, z))
    diff = x - z
    return math.exp(-spec.gamma * float(np.sum(diff * diff)))


def gram(spec: KernelSpec, rows, cols=None) -> np.ndarray:
    """Kernel matrix ``G[i, j] = K(rows[i], cols[j])``.

    ``cols=None`` builds the self-Gram of ``rows``, which is symmetrized
    so that ``G == G.T`` holds exactly.
    """
    X = _as_matrix(rows, "rows")
    same = cols is None
    Z = X if same else _as_matrix(cols, "cols")
    if X.shape[1] != Z.shape[1]:
        raise KernelError(
            f"dimension mismatch: rows have d={X.shape[1]}, cols have d={Z.shape[1]}")
    if spec.family == LINEAR:
        G = X @ Z.T
    else:
        # cdist sums (x_k - z_k)^2 directly, no |x|^2 + |z|^2 - 2x.z expansion
        G = np.exp(-spec.gamma * cdist(X, Z, "sqeuclidean"))
    if same:
        G = 0.5 * (G + G.T)
        if spec.family == RADIAL:
            np.fill_diagonal(G, 1.0)
    return G
