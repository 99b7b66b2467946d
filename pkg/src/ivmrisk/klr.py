"""Regularized kernel logistic regression fitted by Newton-Raphson / IRLS.

The penalized negative log-likelihood over a kernel basis is::

    H(a) = -y^T (K_a a) + 1^T log(1 + exp(K_a a)) + (lam / 2) a^T K_q a

with ``K_a`` the N x q regressor Gram (all training rows against the basis)
and ``K_q`` the q x q Gram of the basis itself.  Labels are in {0, 1} and
the fitted function carries no intercept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .kernels import KernelSpec, gram

P_CLAMP = 1e-10
MAX_HALVINGS = 30
JITTER_START = 1e-10
JITTER_STOP = 1e-4


class SolverError(RuntimeError):
    """The Newton system could not be solved, even after ridge jitter."""

    def __init__(self, message, candidate=None):
        super().__init__(message)
        self.candidate = candidate


def check_binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("labels are empty")
    bad = ~((y == 0.0) | (y == 1.0))
    if bad.any():
        raise ValueError(f"labels must be 0 or 1; first offending index {int(np.argmax(bad))}")
    return y


@dataclass(frozen=True)
class KlrProblem:
    K_a: np.ndarray
    K_q: np.ndarray
    labels: np.ndarray
    lam: float

    def __post_init__(self):
        K_a = np.atleast_2d(np.asarray(self.K_a, dtype=float))
        K_q = np.atleast_2d(np.asarray(self.K_q, dtype=float))
        y = check_binary_labels(self.labels)
        lam = float(self.lam)
        if not (math.isfinite(lam) and lam > 0):
            raise ValueError(f"lam must be positive, got {self.lam!r}")
        if K_q.shape != (K_a.shape[1], K_a.shape[1]):
            raise ValueError(
                f"K_q has shape {K_q.shape}, expected ({K_a.shape[1]}, {K_a.shape[1]})")
        if K_a.shape[0] != y.size:
            raise ValueError(f"K_a has {K_a.shape[0]} rows but there are {y.size} labels")
        object.__setattr__(self, "K_a", K_a)
        object.__setattr__(self, "K_q", K_q)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return self.K_a.shape[0]

    @property
    def q(self) -> int:
        return self.K_a.shape[1]

    @classmethod
    def full(cls, kernel: KernelSpec, X, labels, lam) -> "KlrProblem":
        """Full-basis problem: every training point is a basis point."""
        K = gram(kernel, X)
        return cls(K, K, labels, lam)


@dataclass(frozen=True)
class KlrSolution:
    a: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: tuple = field(default=(), repr=False)


def _coef(problem, a):
    a = np.asarray(a, dtype=float).ravel()
    if a.size != problem.q:
        raise ValueError(f"coefficient length {a.size} does not match basis size {problem.q}")
    return a


def softplus(f):
    """``log(1 + exp(f))`` without overflow for large ``|f|``."""
    return np.logaddexp(0.0, f)


def nll_objective(problem: KlrProblem, a) -> float:
    a = _coef(problem, a)
    f = problem.K_a @ a
    return float(-problem.labels @ f + softplus(f).sum()
                 + 0.5 * problem.lam * (a @ problem.K_q @ a))


def gradient(problem: KlrProblem, a) -> np.ndarray:
    """Closed-form gradient ``-K_a^T (y - p) + lam K_q a``."""
    a = _coef(problem, a)
    p = expit(problem.K_a @ a)
    return -problem.K_a.T @ (problem.labels - p) + problem.lam * (problem.K_q @ a)


def solve_spd(A, b, candidate=None):
    """Solve the symmetric system ``A x = b``, escalating a diagonal ridge if singular."""
    A = np.asarray(A, dtype=float)
    try:
        return cho_solve(cho_factor(A), b)
    except LinAlgError:
        pass
    scale = max(float(np.trace(A)) / A.shape[0], np.finfo(float).tiny)
    eps = JITTER_START
    while eps <= JITTER_STOP * (1 + 1e-9):
        try:
            return cho_solve(cho_factor(A + eps * scale * np.eye(A.shape[0])), b)
        except LinAlgError:
            eps *= 10.0
    raise SolverError(
        f"Newton system is singular even with ridge jitter {JITTER_STOP:g} * trace/q",
        candidate=candidate)


def irls_weights(f):
    """Clamped probabilities, IRLS weights ``p(1-p)``."""
    p = np.clip(expit(f), P_CLAMP, 1.0 - P_CLAMP)
    return p, p * (1.0 - p)


def newton_step(problem: KlrProblem, a_prev) -> np.ndarray:
    """One full IRLS update ``(K_a^T W K_a + lam K_q)^{-1} K_a^T W z``."""
    a_prev = _coef(problem, a_prev)
    K_a = problem.K_a
    f = K_a @ a_prev
    p, w = irls_weights(f)
    z = f + (problem.labels - p) / w
    A = K_a.T @ (w[:, None] * K_a) + problem.lam * problem.K_q
    return solve_spd(A, K_a.T @ (w * z))


def fit_klr(problem: KlrProblem, tol: float = 1e-8, max_iter: int = 100,
            a0=None) -> KlrSolution:
    """Minimize H by Newton-Raphson with backtracking step-halving.

    Starts from ``a0`` (zero by default).  Stops when
    ``|H_k - H_{k-1}| <= tol * (1 + |H_k|)``; hitting ``max_iter`` first
    returns the current iterate with ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    a = np.zeros(problem.q) if a0 is None else _coef(problem, a0).copy()
    H = nll_objective(problem, a)
    trace = [H]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        step = newton_step(problem, a) - a
        t = 1.0
        a_new, H_new = a, H
        for _ in range(MAX_HALVINGS + 1):
            cand = a + t * step
            H_cand = nll_objective(problem, cand)
            if H_cand <= H:
                a_new, H_new = cand, H_cand
                break
            t *= 0.5
        done = abs(H - H_new) <= tol * (1.0 + abs(H_new))
        a, H = a_new, H_new
        trace.append(H)
        if done:
            converged = True
            break
    return KlrSolution(a=a, objective=H, iterations=it, converged=converged,
                       trace=tuple(trace))


def decision_function(a, basis, kernel: KernelSpec, X) -> np.ndarray:
    """Latent score ``sum_j a_j K(x, basis_j)`` for each row of ``X``."""
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != basis.shape[1]:
        raise ValueError(
            f"dimension mismatch: query has d={X.shape[1]}, model expects d={basis.shape[1]}")
    return gram(kernel, X, basis) @ np.asarray(a, dtype=float)


def predict_prob(a, basis, kernel: KernelSpec, x):
    """Class-1 probability for one query vector (float) or many rows (array)."""
    single = np.ndim(x) == 1
    p = expit(decision_function(a, basis, kernel, x))
    # expit saturates to exactly 0 or 1 in floating point; keep it open
    p = np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(p[0]) if single else p


@dataclass(frozen=True)
class KlrModel:
    """Fitted coefficients over a set of basis points."""

    a: np.ndarray
    basis: np.ndarray
    kernel: KernelSpec

    def decision_function(self, X):
        return decision_function(self.a, self.basis, self.kernel, X)

    def predict_proba(self, X):
        return predict_prob(self.a, self.basis, self.kernel, X)


def fit_full_klr(X, labels, kernel: KernelSpec, lam: float, tol=1e-8, max_iter=100):
    """Full-basis KLR on ``X``; returns ``(model, solution)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sol = fit_klr(KlrProblem.full(kernel, X, labels, lam), tol=tol, max_iter=max_iter)
    return KlrModel(sol.a, X.copy(), kernel), sol
