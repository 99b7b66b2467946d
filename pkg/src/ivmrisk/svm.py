"""Soft-margin SVM baseline trained by SMO, plus a cross-validated grid search.

The dual solved is::

    max_a  sum(a) - 1/2 sum_ij a_i a_j y_i y_j K(x_i, x_j)
    s.t.   0 <= a_i <= C,  sum_i a_i y_i = 0

Working pairs are chosen deterministically: the first index is the worst
KKT violator, the second the partner maximizing ``|E_i - E_j|`` among
feasible directions (maximal violating pair).  Ties go to the lowest index.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .kernels import LINEAR, KernelSpec, gram

PAPER_GAMMAS = (0.001, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
PAPER_COSTS = (0.01, 0.1, 1.0, 10.0, 100.0)
TAU = 1e-12


@dataclass(frozen=True)
class SvmConfig:
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec.radial(1.0))
    cost: float = 1.0
    smo_tol: float = 1e-3
    max_passes: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.cost) and self.cost > 0):
            raise ValueError(f"cost must be positive, got {self.cost!r}")
        if not self.smo_tol > 0:
            raise ValueError("smo_tol must be positive")

    @staticmethod
    def cost_from_lambda(lam: float, n: int) -> float:
        """Cost equivalent to a hinge-loss penalty ``lam * ||f||^2`` over ``n`` points."""
        return 1.0 / (2.0 * n * lam)


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    kernel: KernelSpec
    support_indices: np.ndarray | None = None
    alphas: np.ndarray | None = None
    cost: float | None = None
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        sv = np.atleast_2d(np.asarray(self.support_vectors, dtype=float))
        coef = np.asarray(self.dual_coeffs, dtype=float).ravel()
        if coef.size == 0 or sv.shape[0] == 0:
            raise ValueError("an SVM model needs at least one support vector")
        if sv.shape[0] != coef.size:
            raise ValueError("one dual coefficient per support vector is required")
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "dual_coeffs", coef)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def n_support(self) -> int:
        return self.dual_coeffs.size

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(
                f"dimension mismatch: query has d={X.shape[1]}, "
                f"model expects d={self.support_vectors.shape[1]}")
        return gram(self.kernel, X, self.support_vectors) @ self.dual_coeffs + self.bias

    def predict(self, X):
        """Class labels in {0, 1} from ``sign(f)``; ``f = 0`` maps to 1."""
        return (self.decision_function(X) >= 0).astype(int)


def decision_value(model: SvmModel, x) -> float:
    return float(model.decision_function(np.asarray(x, dtype=float).reshape(1, -1))[0])


def to_signed(labels) -> np.ndarray:
    """Map {0, 1} or {-1, +1} labels to {-1, +1}."""
    y = np.asarray(labels, dtype=float).ravel()
    vals = set(np.unique(y).tolist())
    if vals <= {0.0, 1.0}:
        return np.where(y == 1.0, 1.0, -1.0)
    if vals <= {-1.0, 1.0}:
        return y.copy()
    raise ValueError(f"labels must be in {{0,1}} or {{-1,+1}}, got {sorted(vals)}")


@numba.njit(cache=True)
def _smo(K, y, C, tol, max_iter):
    n = y.size
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 1/2 a'Qa - sum(a)
    it = 0
    converged = False
    while it < max_iter:
        # i: largest -y G over I_up; j: smallest -y G over I_low
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                if v < gmin:
                    gmin = v
                    j = t
        if i < 0 or j < 0 or gmax - gmin < tol:
            converged = True
            break
        it += 1
        Kii = K[i, i]
        Kjj = K[j, j]
        Kij = K[i, j]
        ai = alpha[i]
        aj = alpha[j]
        if y[i] != y[j]:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni = ai + delta
            nj = aj + delta
            if diff > 0:
                if nj < 0:
                    nj = 0.0
                    ni = diff
            else:
                if ni < 0:
                    ni = 0.0
                    nj = -diff
            if diff > 0:
                if ni > C:
                    ni = C
                    nj = C - diff
            else:
                if nj > C:
                    nj = C
                    ni = C + diff
        else:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            s = ai + aj
            ni = ai - delta
            nj = aj + delta
            if s > C:
                if ni > C:
                    ni = C
                    nj = s - C
            else:
                if nj < 0:
                    nj = 0.0
                    ni = s
            if s > C:
                if nj > C:
                    nj = C
                    ni = s - C
            else:
                if ni < 0:
                    ni = 0.0
                    nj = s
        dai = ni - ai
        daj = nj - aj
        alpha[i] = ni
        alpha[j] = nj
        for t in range(n):
            G[t] += y[t] * (y[i] * K[t, i] * dai + y[j] * K[t, j] * daj)
    # bias: mean of -y G over free vectors, else midpoint of the feasible interval
    total = 0.0
    nfree = 0
    ub = np.inf
    lb = -np.inf
    for t in range(n):
        v = -y[t] * G[t]
        if 0 < alpha[t] < C:
            total += v
            nfree += 1
        up = (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0)
        low = (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C)
        if up and v > lb:
            lb = v
        if low and v < ub:
            ub = v
    if nfree > 0:
        b = total / nfree
    elif np.isfinite(ub) and np.isfinite(lb):
        b = 0.5 * (ub + lb)
    elif np.isfinite(lb):
        b = lb
    else:
        b = ub
    return alpha, b, it, converged


def dual_objective(alpha, K, y) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def _fit_gram(K, y, config: SvmConfig):
    n = y.size
    passes = 10 * n if config.max_passes is None else config.max_passes
    alpha, b, it, converged = _smo(np.ascontiguousarray(K), y, float(config.cost),
                                   float(config.smo_tol), int(passes) * n)
    return alpha, b, it, converged


def fit_svm(X, labels, config: SvmConfig, K=None) -> SvmModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = to_signed(labels)
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but there are {y.size} labels")
    if np.unique(y).size < 2:
        raise ValueError(f"degenerate labels: every label is {int(y[0])}")
    K = gram(config.kernel, X) if K is None else K
    alpha, b, it, converged = _fit_gram(K, y, config)
    sv = np.flatnonzero(alpha > 0)
    return SvmModel(support_vectors=X[sv].copy(), dual_coeffs=alpha[sv] * y[sv], bias=b,
                    kernel=config.kernel, support_indices=sv, alphas=alpha[sv].copy(),
                    cost=config.cost, converged=bool(converged), iterations=int(it))


class StratificationError(ValueError):
    pass


def stratified_folds(labels, folds: int, seed: int = 0):
    """Fold id per observation; each class is dealt round-robin after a seeded shuffle."""
    y = np.asarray(labels).ravel()
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=int)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % folds
    for f in range(folds):
        train = y[fold != f]
        if np.unique(train).size < 2 or not np.any(fold == f):
            raise StratificationError(
                f"fold {f} leaves a single class for training; use fewer folds")
    return fold


@dataclass
class GridSearchResult:
    best: SvmConfig
    best_error: float
    table: list

    def best_for(self, family: str):
        rows = [r for r in self.table if r["kernel"] == family]
        if not rows:
            raise KeyError(family)
        row = min(rows, key=lambda r: r["cv_error"])
        return row


def grid_search(X, labels, kernels=("radial", "linear"), gammas=PAPER_GAMMAS,
                costs=PAPER_COSTS, folds=5, seed=0, smo_tol=1e-3) -> GridSearchResult:
    """Cross-validated misclassification error for every (kernel, gamma, cost) cell.

    Rows come back in grid order (kernels, then gammas, then costs); the best
    cell is the first with the smallest error.  The linear kernel ignores
    gamma, so its rows share one computation per cost.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = to_signed(labels)
    if not (kernels and gammas and costs):
        raise ValueError("grids must be non-empty")
    fold = stratified_folds(y, folds, seed)
    table = []
    cache = {}
    for family, gamma, cost in itertools.product(kernels, gammas, costs):
        kernel = KernelSpec(family, gamma)
        key = (family, None if family == LINEAR else gamma, cost)
        if key not in cache:
            cache[key] = _cv_error(X, y, fold, folds, kernel, cost, smo_tol)
        err, nsv = cache[key]
        table.append({"kernel": family, "gamma": float(gamma), "cost": float(cost),
                      "cv_error": err, "mean_support": nsv})
    best_row = min(table, key=lambda r: r["cv_error"])
    best = SvmConfig(KernelSpec(best_row["kernel"], best_row["gamma"]), best_row["cost"], smo_tol)
    return GridSearchResult(best=best, best_error=best_row["cv_error"], table=table)


def _cv_error(X, y, fold, folds, kernel, cost, smo_tol):
    K = gram(kernel, X)
    wrong = 0
    nsv = 0
    cfg = SvmConfig(kernel, cost, smo_tol)
    for f in range(folds):
        tr = np.flatnonzero(fold != f)
        te = np.flatnonzero(fold == f)
        alpha, b, _, _ = _fit_gram(K[np.ix_(tr, tr)], y[tr], cfg)
        dec = K[np.ix_(te, tr)] @ (alpha * y[tr]) + b
        pred = np.where(dec >= 0, 1.0, -1.0)
        wrong += int(np.sum(pred != y[te]))
        nsv += int(np.sum(alpha > 0))
    return wrong / y.size, nsv / folds
