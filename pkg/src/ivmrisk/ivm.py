"""Import Vector Machine: sparse kernel logistic regression by greedy basis growth.

Starting from an empty import set ``S``, every remaining training point is
tried as an extra basis column; the candidate whose KLR subproblem reaches
the lowest penalized NLL joins ``S``.  Growth stops when the objective
trace flattens (relative change over ``conv_lag`` steps below ``conv_tol``)
or ``max_import`` points have been imported.

Two candidate-scoring modes exist:

``exact``
    every candidate subproblem is solved to convergence (warm-started from
    the previous optimum padded with a zero coefficient);
``onestep``
    a single step-halved Newton update per candidate, evaluated for all
    candidates at once through a block (Schur complement) solve.  The final
    import set is refitted to convergence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .kernels import KernelSpec, gram
from .klr import (MAX_HALVINGS, P_CLAMP, KlrProblem, SolverError, check_binary_labels,
                  fit_klr, predict_prob, softplus, solve_spd)

log = logging.getLogger(__name__)

EXACT = "exact"
ONESTEP = "onestep"
MODES = (EXACT, ONESTEP)
AUTO_ONESTEP_ABOVE = 200
# bound on the (candidates x N x basis) workspace of the exact batch solver
_CHUNK_ELEMENTS = 4_000_000


class IvmError(RuntimeError):
    """Every candidate in a greedy step failed to solve."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})


@dataclass(frozen=True)
class IvmConfig:
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec.radial(1.0))
    lam: float = 1.0
    conv_tol: float = 1e-4
    conv_lag: int = 1
    max_import: int | None = None
    selection_mode: str | None = None
    klr_tol: float = 1e-8
    klr_max_iter: int = 100

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lam must be positive, got {self.lam!r}")
        if not self.conv_tol >= 0:
            raise ValueError("conv_tol must be >= 0")
        if self.conv_lag < 1:
            raise ValueError("conv_lag must be >= 1")
        if self.max_import is not None and self.max_import < 1:
            raise ValueError("max_import must be >= 1")
        if self.selection_mode is not None and self.selection_mode not in MODES:
            raise ValueError(f"selection_mode must be one of {MODES}")

    def mode_for(self, n: int) -> str:
        if self.selection_mode is not None:
            return self.selection_mode
        return ONESTEP if n > AUTO_ONESTEP_ABOVE else EXACT


@dataclass(frozen=True)
class IvmModel:
    """Fitted IVM: coefficients over the ordered import points."""

    import_points: np.ndarray
    a: np.ndarray
    kernel: KernelSpec
    lam: float
    history: np.ndarray
    import_indices: np.ndarray | None = None
    converged: bool = True

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.import_points, dtype=float))
        a = np.asarray(self.a, dtype=float).ravel()
        hist = np.asarray(self.history, dtype=float).ravel()
        if a.size == 0 or pts.shape[0] == 0:
            raise ValueError("an IVM model needs at least one import point")
        if not (pts.shape[0] == a.size == hist.size):
            raise ValueError(
                f"import points ({pts.shape[0]}), coefficients ({a.size}) and history "
                f"({hist.size}) must have equal length")
        if self.import_indices is not None:
            idx = np.asarray(self.import_indices, dtype=int).ravel()
            if idx.size != a.size or np.unique(idx).size != idx.size:
                raise ValueError("import indices must be distinct, one per import point")
            object.__setattr__(self, "import_indices", idx)
        object.__setattr__(self, "import_points", pts)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "history", hist)

    @property
    def n_import(self) -> int:
        return self.a.size

    @property
    def objective(self) -> float:
        return float(self.history[-1])

    def decision_function(self, X):
        return gram(self.kernel, np.atleast_2d(X), self.import_points) @ self.a

    def predict_proba(self, X):
        return predict_prob(self.a, self.import_points, self.kernel, X)


def predict_ivm(model: IvmModel, x):
    return predict_prob(model.a, model.import_points, model.kernel, x)


def _validate(X, labels):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = check_binary_labels(labels)
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but there are {y.size} labels")
    return X, y


def _objectives(F, y, reg, lam):
    """Column-wise objective for a score matrix F (N x m) and quadratic terms reg (m)."""
    return (softplus(F) - y[:, None] * F).sum(axis=0) + 0.5 * lam * reg


def _exact_batch(K, y, lam, S, cands, a_prev, tol, max_iter):
    """Converged KLR subproblems over ``S + [c]`` for each candidate ``c``.

    Returns ``(H, A, failures)`` with ``A[i]`` the coefficient vector for
    ``cands[i]`` (NaN objective for failures).
    """
    m = len(cands)
    q = len(S) + 1
    n = K.shape[0]
    H_out = np.full(m, np.nan)
    A_out = np.zeros((m, q))
    failures = {}
    chunk = max(1, _CHUNK_ELEMENTS // (n * q))
    KS = K[:, S]
    KSS = K[np.ix_(S, S)]
    for start in range(0, m, chunk):
        cs = np.asarray(cands[start:start + chunk])
        mc = cs.size
        Ka = np.empty((mc, n, q))
        Ka[:, :, :q - 1] = KS
        Ka[:, :, q - 1] = K[:, cs].T
        Kq = np.empty((mc, q, q))
        Kq[:, :q - 1, :q - 1] = KSS
        Kq[:, :q - 1, q - 1] = K[np.ix_(S, cs)].T
        Kq[:, q - 1, :q - 1] = K[np.ix_(cs, S)]
        Kq[:, q - 1, q - 1] = K[cs, cs]
        a = np.zeros((mc, q))
        a[:, :q - 1] = a_prev

        def obj(idx, coef):
            F = np.einsum("mnk,mk->nm", Ka[idx], coef)
            reg = np.einsum("mk,mkl,ml->m", coef, Kq[idx], coef)
            return _objectives(F, y, reg, lam)

        H = obj(np.arange(mc), a)
        active = np.arange(mc)
        ok = np.ones(mc, dtype=bool)
        it = 0
        while active.size and it < max_iter:
            it += 1
            Kact = Ka[active]
            f = np.einsum("mnk,mk->mn", Kact, a[active])
            p = np.clip(expit(f), P_CLAMP, 1.0 - P_CLAMP)
            w = p * (1.0 - p)
            z = f + (y - p) / w
            lhs = np.matmul(Kact.transpose(0, 2, 1), w[:, :, None] * Kact) + lam * Kq[active]
            rhs = np.einsum("mnk,mn->mk", Kact, w * z)
            try:
                a_new = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                a_new = np.empty_like(rhs)
                for i in range(active.size):
                    try:
                        a_new[i] = solve_spd(lhs[i], rhs[i], candidate=int(cs[active[i]]))
                    except SolverError as exc:
                        failures[int(cs[active[i]])] = str(exc)
                        ok[active[i]] = False
                        a_new[i] = a[active[i]]
            step = a_new - a[active]
            t = np.ones(active.size)
            accepted = np.zeros(active.size, dtype=bool)
            H_new = H[active].copy()
            a_acc = a[active].copy()
            for _ in range(MAX_HALVINGS + 1):
                todo = np.flatnonzero(~accepted)
                if not todo.size:
                    break
                trial = a[active[todo]] + t[todo, None] * step[todo]
                H_trial = obj(active[todo], trial)
                good = H_trial <= H[active[todo]]
                sel = todo[good]
                a_acc[sel] = trial[good]
                H_new[sel] = H_trial[good]
                accepted[sel] = True
                t[todo[~good]] *= 0.5
            done = np.abs(H[active] - H_new) <= tol * (1.0 + np.abs(H_new))
            a[active] = a_acc
            H[active] = H_new
            active = active[~done & ok[active]]
        H_out[start:start + mc] = np.where(ok, H, np.nan)
        A_out[start:start + mc] = a
    return H_out, A_out, failures


def _onestep_batch(K, y, lam, S, cands, a_prev):
    """One step-halved Newton update per candidate, all candidates at once."""
    S = list(S)
    cands = np.asarray(cands)
    q = len(S)
    KS = K[:, S]
    KC = K[:, cands]
    f = KS @ a_prev if q else np.zeros(K.shape[0])
    p = np.clip(expit(f), P_CLAMP, 1.0 - P_CLAMP)
    w = p * (1.0 - p)
    wz = w * f + (y - p)
    KSS = K[np.ix_(S, S)]
    KSC = K[np.ix_(S, cands)]
    kcc = K[cands, cands]
    d = (w[:, None] * KC * KC).sum(axis=0) + lam * kcc
    rC = KC.T @ wz
    failures = {}
    if q:
        A = KS.T @ (w[:, None] * KS) + lam * KSS
        B = KS.T @ (w[:, None] * KC) + lam * KSC
        rS = KS.T @ wz
        sol = solve_spd(A, np.column_stack([B, rS]))
        AinvB, Ainv_rS = sol[:, :-1], sol[:, -1]
        schur = d - np.einsum("km,km->m", B, AinvB)
        aC = (rC - B.T @ Ainv_rS) / np.where(schur > 0, schur, 1.0)
        aS = Ainv_rS[:, None] - AinvB * aC[None, :]
        # near-zero Schur complement: the candidate (almost) duplicates a basis point
        weak = schur <= 1e-12 * d
        for i in np.flatnonzero(weak):
            idx = S + [int(cands[i])]
            Ka = K[:, idx]
            lhs = Ka.T @ (w[:, None] * Ka) + lam * K[np.ix_(idx, idx)]
            try:
                full = solve_spd(lhs, Ka.T @ wz, candidate=int(cands[i]))
            except SolverError as exc:
                failures[int(cands[i])] = str(exc)
                full = np.append(a_prev, 0.0)
            aS[:, i], aC[i] = full[:-1], full[-1]
    else:
        aC = rC / d
        aS = np.zeros((0, cands.size))

    dS = aS - a_prev[:, None] if q else aS
    dF = (KS @ dS if q else 0.0) + KC * aC[None, :]
    reg0 = float(a_prev @ KSS @ a_prev) if q else 0.0
    KCS_aprev = KSC.T @ a_prev if q else np.zeros(cands.size)
    reg1 = (np.einsum("km,km->m", dS, KSS @ a_prev[:, None]) if q else 0.0) + aC * KCS_aprev
    reg2 = ((np.einsum("km,km->m", dS, KSS @ dS) + 2 * aC * np.einsum("km,km->m", KSC, dS))
            if q else 0.0) + aC * aC * kcc
    H0 = float((softplus(f) - y * f).sum() + 0.5 * lam * reg0)

    m = cands.size
    t = np.ones(m)
    H = np.full(m, H0)
    T = np.zeros(m)
    accepted = np.zeros(m, dtype=bool)
    for _ in range(MAX_HALVINGS + 1):
        todo = np.flatnonzero(~accepted)
        if not todo.size:
            break
        tt = t[todo]
        F = f[:, None] + dF[:, todo] * tt[None, :]
        reg = reg0 + 2 * tt * _take(reg1, todo) + tt * tt * _take(reg2, todo)
        H_trial = _objectives(F, y, reg, lam)
        good = H_trial <= H0
        H[todo[good]] = H_trial[good]
        T[todo[good]] = tt[good]
        accepted[todo[good]] = True
        t[todo[~good]] *= 0.5
    A = np.zeros((m, q + 1))
    if q:
        A[:, :q] = a_prev[None, :] + (T[None, :] * dS).T
    A[:, q] = T * aC
    for c in failures:
        H[np.flatnonzero(cands == c)] = np.nan
    return H, A, failures


def _take(v, idx):
    return v[idx] if np.ndim(v) else v


def _scan(K, y, cfg, mode, S, R, a_prev):
    if mode == EXACT:
        return _exact_batch(K, y, cfg.lam, S, R, a_prev, cfg.klr_tol, cfg.klr_max_iter)
    return _onestep_batch(K, y, cfg.lam, S, R, a_prev)


def _greedy(K, y, cfg, mode, S, R, a_prev):
    R = sorted(int(r) for r in R)
    if not R:
        raise ValueError("no remaining candidates")
    H, A, failures = _scan(K, y, cfg, mode, list(S), R, np.asarray(a_prev, dtype=float))
    if np.all(np.isnan(H)):
        raise IvmError(f"all {len(R)} candidates failed to solve", failures)
    # nanargmin returns the first minimum: ties go to the lowest index
    best = int(np.nanargmin(H))
    return R[best], float(H[best]), A[best]


def candidate_objective(X, labels, S, candidate, config: IvmConfig, a_prev=None,
                        mode=None, K=None):
    """Objective and coefficients of the subproblem over ``S + [candidate]``."""
    X, y = _validate(X, labels)
    S = [int(s) for s in S]
    if candidate in S:
        raise ValueError(f"candidate {candidate} is already in the import set")
    K = gram(config.kernel, X) if K is None else K
    mode = mode or config.mode_for(len(y))
    a_prev = np.zeros(len(S)) if a_prev is None else np.asarray(a_prev, dtype=float)
    H, A, failures = _scan(K, y, config, mode, S, [int(candidate)], a_prev)
    if failures:
        raise SolverError(failures[int(candidate)], candidate=int(candidate))
    return float(H[0]), A[0]


def greedy_step(X, labels, S, R, config: IvmConfig, a_prev=None, mode=None, K=None):
    """Scan every candidate in ``R``; return ``(chosen, objective, a)``."""
    X, y = _validate(X, labels)
    K = gram(config.kernel, X) if K is None else K
    mode = mode or config.mode_for(len(y))
    a_prev = np.zeros(len(S)) if a_prev is None else a_prev
    return _greedy(K, y, config, mode, S, R, a_prev)


def fit_ivm(X, labels, config: IvmConfig) -> IvmModel:
    X, y = _validate(X, labels)
    n = y.size
    if n < 2:
        raise ValueError("need at least two training points")
    if y.min() == y.max():
        raise ValueError(f"degenerate labels: every label is {int(y[0])}")
    mode = config.mode_for(n)
    max_import = n if config.max_import is None else min(config.max_import, n)
    K = gram(config.kernel, X)

    S: list[int] = []
    coefs: list[np.ndarray] = []
    history: list[float] = []
    a = np.zeros(0)
    trace = [n * math.log(2.0)]
    converged = False
    while len(S) < max_import:
        R = np.setdiff1d(np.arange(n), S)
        chosen, H, a = _greedy(K, y, config, mode, S, R, a)
        S.append(chosen)
        coefs.append(a.copy())
        history.append(H)
        trace.append(H)
        log.debug("ivm step %d: import %d, H=%.10g", len(S), chosen, H)
        if len(trace) > config.conv_lag and H != 0:
            rel = abs(H - trace[-1 - config.conv_lag]) / abs(H)
            if rel < config.conv_tol:
                converged = True
                break
    if len(S) == n:
        converged = True

    best = int(np.argmin(history))
    S = S[:best + 1]
    history = history[:best + 1]
    a = coefs[best]
    if mode == ONESTEP:
        prob = KlrProblem(K[:, S], K[np.ix_(S, S)], y, config.lam)
        sol = fit_klr(prob, tol=config.klr_tol, max_iter=config.klr_max_iter, a0=a)
        a = sol.a
    return IvmModel(import_points=X[S].copy(), a=a, kernel=config.kernel, lam=config.lam,
                    history=np.array(history), import_indices=np.array(S),
                    converged=converged)
