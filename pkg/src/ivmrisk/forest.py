"""Random forest classifier with out-of-bag error and permutation importance.

Trees are CART classifiers grown on bootstrap samples: at every node
``mtry`` features are drawn without replacement and the split with the
largest Gini decrease is taken.  Variable importance of feature ``j`` is
the out-of-bag misclassification increase after permuting ``j`` within
each tree's OOB sample, averaged over all ``ntree`` trees.

Every tree, and every (tree, feature) permutation, draws from its own
stream spawned off one seed, so results do not depend on evaluation order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestConfig:
    ntree: int = 400
    mtry: int = 2
    min_node: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ntree < 1:
            raise ValueError("ntree must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node < 1:
            raise ValueError("min_node must be >= 1")


@numba.njit(cache=True)
def _gini_sum(c0, c1):
    n = c0 + c1
    if n == 0:
        return 0.0
    return n - (c0 * c0 + c1 * c1) / n  # n * gini


@numba.njit(cache=True)
def _grow(X, y, sample, mtry, min_node, seed):
    np.random.seed(seed)
    n = sample.size
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    counts = np.zeros((cap, 2))
    idx = sample.copy()
    buf = np.empty(n, np.int64)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1
    feats = np.arange(d)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        c0 = 0.0
        c1 = 0.0
        for k in range(lo, hi):
            if y[idx[k]] == 1:
                c1 += 1
            else:
                c0 += 1
        counts[node, 0] = c0
        counts[node, 1] = c1
        m = hi - lo
        if m < 2 or m < min_node or c0 == 0 or c1 == 0:
            continue
        # partial Fisher-Yates: first mtry entries are the sampled features
        for k in range(mtry):
            r = k + np.random.randint(d - k)
            tmp = feats[k]
            feats[k] = feats[r]
            feats[r] = tmp
        parent = _gini_sum(c0, c1)
        best_gain = 1e-12
        best_f = -1
        best_t = 0.0
        vals = np.empty(m)
        labs = np.empty(m, np.int64)
        for kf in range(mtry):
            f = feats[kf]
            for k in range(m):
                vals[k] = X[idx[lo + k], f]
                labs[k] = y[idx[lo + k]]
            order = np.argsort(vals, kind="mergesort")
            l0 = 0.0
            l1 = 0.0
            for k in range(m - 1):
                if labs[order[k]] == 1:
                    l1 += 1
                else:
                    l0 += 1
                v = vals[order[k]]
                vn = vals[order[k + 1]]
                if vn == v:
                    continue
                gain = parent - _gini_sum(l0, l1) - _gini_sum(c0 - l0, c1 - l1)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (v + vn)
                    if t >= vn:
                        t = v
                    best_t = t
        if best_f < 0:
            continue
        nl = 0
        nr = 0
        for k in range(lo, hi):
            if X[idx[k], best_f] <= best_t:
                idx[lo + nl] = idx[k]
                nl += 1
            else:
                buf[nr] = idx[k]
                nr += 1
        for k in range(nr):
            idx[lo + nl + k] = buf[k]
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = lo + nl
        top += 1
        st_node[top] = n_nodes + 1
        st_lo[top] = lo + nl
        st_hi[top] = hi
        top += 1
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy())


@numba.njit(cache=True)
def _predict(feature, threshold, left, right, counts, X):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        # majority vote; an even split goes to class 0
        out[i] = 1 if counts[node, 1] > counts[node, 0] else 0
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        return _predict(self.feature, self.threshold, self.left, self.right, self.counts,
                        np.ascontiguousarray(X, dtype=float))


@dataclass(frozen=True)
class Forest:
    trees: tuple
    oob_masks: np.ndarray  # (ntree, N) True where the point is out of bag
    config: ForestConfig
    n_features: int

    @property
    def ntree(self) -> int:
        return len(self.trees)

    def votes(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        v = np.zeros(X.shape[0], dtype=np.int64)
        for tree in self.trees:
            v += tree.predict(X)
        return v

    def predict_proba(self, X) -> np.ndarray:
        return self.votes(X) / self.ntree

    def predict(self, X) -> np.ndarray:
        # ties go to class 0, as in the leaves
        return (2 * self.votes(X) > self.ntree).astype(int)


def _check(X, labels):
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    y = np.asarray(labels).ravel()
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but there are {y.size} labels")
    return X, y.astype(np.int64)


def grow_tree(X, labels, sample=None, mtry=None, min_node=1, seed=0) -> Tree:
    """One CART tree on the rows ``sample`` (all rows by default, repeats allowed)."""
    X, y = _check(X, labels)
    n, d = X.shape
    sample = np.arange(n) if sample is None else np.asarray(sample, dtype=np.int64)
    mtry = d if mtry is None else mtry
    if not 1 <= mtry <= d:
        raise ValueError(f"mtry={mtry} must lie in [1, d={d}]")
    return Tree(*_grow(X, y, sample, mtry, min_node, seed))


def fit_forest(X, labels, config: ForestConfig = ForestConfig()) -> Forest:
    X, y = _check(X, labels)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two observations")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    if config.mtry > d:
        raise ValueError(f"mtry={config.mtry} exceeds the number of features d={d}")
    trees = []
    oob = np.zeros((config.ntree, n), dtype=bool)
    for t, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.ntree)):
        rng = np.random.Generator(np.random.PCG64(child))
        sample = rng.integers(0, n, size=n)
        oob[t] = np.bincount(sample, minlength=n) == 0
        tree_seed = int(child.generate_state(1, np.uint32)[0])
        trees.append(Tree(*_grow(X, y, sample, config.mtry, config.min_node, tree_seed)))
    return Forest(trees=tuple(trees), oob_masks=oob, config=config, n_features=d)


def per_tree_oob_error(forest: Forest, X, labels, t: int) -> float:
    """Misclassification rate of tree ``t`` on its own OOB sample (NaN if empty)."""
    X, y = _check(X, labels)
    mask = forest.oob_masks[t]
    if not mask.any():
        return float("nan")
    return float(np.mean(forest.trees[t].predict(X[mask]) != y[mask]))


@dataclass(frozen=True)
class OobResult:
    error: float
    per_tree: np.ndarray
    n_empty_trees: int
    n_scored: int


def oob_error(forest: Forest, X, labels) -> OobResult:
    """Ensemble OOB error: each point voted on only by trees that did not see it."""
    X, y = _check(X, labels)
    n = y.size
    votes = np.zeros(n, dtype=np.int64)
    nvote = np.zeros(n, dtype=np.int64)
    per_tree = np.full(forest.ntree, np.nan)
    empty = 0
    for t, tree in enumerate(forest.trees):
        mask = forest.oob_masks[t]
        if not mask.any():
            empty += 1
            continue
        pred = tree.predict(X[mask])
        per_tree[t] = np.mean(pred != y[mask])
        votes[mask] += pred
        nvote[mask] += 1
    if empty:
        log.warning("%d trees had an empty out-of-bag sample", empty)
    scored = nvote > 0
    pred = (2 * votes > nvote).astype(int)
    err = float(np.mean(pred[scored] != y[scored])) if scored.any() else float("nan")
    return OobResult(error=err, per_tree=per_tree, n_empty_trees=empty,
                     n_scored=int(scored.sum()))


@dataclass(frozen=True)
class Importance:
    """Mean decrease in accuracy per feature.

    ``raw[j]`` is the tree-averaged OOB error increase; ``per_tree`` holds the
    individual increases (ntree x d); ``percent`` rescales the positive part
    of ``raw`` to sum to 100.
    """

    raw: np.ndarray
    per_tree: np.ndarray
    names: tuple | None = None

    @property
    def percent(self) -> np.ndarray:
        pos = np.clip(self.raw, 0.0, None)
        total = pos.sum()
        return 100.0 * pos / total if total > 0 else np.zeros_like(self.raw)

    @property
    def scaled(self) -> np.ndarray:
        """Raw importance divided by its standard error over trees."""
        sd = self.per_tree.std(axis=0, ddof=1) if self.per_tree.shape[0] > 1 else None
        if sd is None:
            return np.zeros_like(self.raw)
        se = sd / np.sqrt(self.per_tree.shape[0])
        return np.divide(self.raw, se, out=np.zeros_like(self.raw), where=se > 0)

    def ranking(self) -> np.ndarray:
        """Feature indices by decreasing importance (stable for ties)."""
        return np.argsort(-self.raw, kind="mergesort")


def permutation_stream(seed: int, tree: int, feature: int) -> np.random.Generator:
    """Counter-based stream for one (tree, feature) permutation."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(tree, feature))
    return np.random.Generator(np.random.Philox(ss))


def permutation_importance(forest: Forest, X, labels, seed: int = 0, names=None) -> Importance:
    X, y = _check(X, labels)
    if X.shape[1] != forest.n_features:
        raise ValueError("X does not have the forest's feature count")
    d = X.shape[1]
    inc = np.zeros((forest.ntree, d))
    for t, tree in enumerate(forest.trees):
        mask = forest.oob_masks[t]
        m = int(mask.sum())
        if m < 2:
            continue
        Xo = X[mask]
        yo = y[mask]
        base = np.count_nonzero(tree.predict(Xo) != yo)
        for j in range(d):
            perm = permutation_stream(seed, t, j).permutation(m)
            col = Xo[:, j].copy()
            Xo[:, j] = col[perm]
            err = np.count_nonzero(tree.predict(Xo) != yo)
            Xo[:, j] = col
            inc[t, j] = (err - base) / m
    raw = inc.sum(axis=0) / forest.ntree
    return Importance(raw=raw, per_tree=inc, names=tuple(names) if names is not None else None)


@dataclass(frozen=True)
class Selection:
    indices: list
    names: list
    short: bool


def feature_correlations(X) -> np.ndarray:
    """Pearson correlations; constant columns correlate 0 with everything else."""
    X = np.asarray(X, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.corrcoef(X, rowvar=False)
    C = np.atleast_2d(np.nan_to_num(C, nan=0.0))
    np.fill_diagonal(C, 1.0)
    return C


def select_features(importance, correlations, k: int, corr_threshold: float, names=None):
    """Walk features by decreasing importance, skipping any too correlated with a pick."""
    raw = importance.raw if isinstance(importance, Importance) else np.asarray(importance, float)
    C = np.asarray(correlations, dtype=float)
    d = raw.size
    if k > d:
        raise ValueError(f"k={k} exceeds the number of features {d}")
    if names is None and isinstance(importance, Importance) and importance.names:
        names = importance.names
    chosen = []
    for j in np.argsort(-raw, kind="mergesort"):
        if len(chosen) == k:
            break
        if all(abs(C[j, s]) <= corr_threshold for s in chosen):
            chosen.append(int(j))
    short = len(chosen) < k
    if short:
        log.warning("only %d of %d features survive the correlation filter", len(chosen), k)
    labels = [names[j] for j in chosen] if names is not None else [str(j) for j in chosen]
    return Selection(indices=chosen, names=labels, short=short)
