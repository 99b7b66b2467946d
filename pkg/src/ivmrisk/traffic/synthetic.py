"""Calibrated synthetic case-control data at the feature level.

Controls follow a Gaussian copula whose marginals are truncated normals
calibrated so that each feature's truncated mean and standard deviation
hit the configured targets on ``[min, max]``.  Cases use the same law
with the latent Gaussian shifted by a per-feature effect (in latent
standard deviations).  A share of the latent variance is common to a
stratum, which mimics matching on location and time of day while leaving
the marginals untouched.

Only four marginals are measured values (the C/U summary statistics of
the model inputs); the rest, the correlation structure and the effect
directions are modelling assumptions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .pipeline import CONTROLS_PER_CASE, CaseControlDataset
from .records import DAY_SECONDS, FEATURE_NAMES, SEGMENTS, SLOT_SECONDS

# (mean, std, min, max) of the four model inputs in the real data
MEASURED_MARGINALS = {
    "Mean_Speed_C": (52.40, 21.47, 7.59, 94.34),
    "CV_Speed_U": (0.34, 0.23, 0.06, 1.98),
    "Mean_Flow_C": (5.82, 2.78, 0.01, 11.80),
    "Std_Occupancy_C": (9.66, 7.59, 0.13, 44.37),
}

# per (statistic, measure); measured rows reused on every segment
_GENERIC = {
    ("Mean", "Flow"): MEASURED_MARGINALS["Mean_Flow_C"],
    ("Std", "Flow"): (1.70, 0.80, 0.05, 6.00),
    ("CV", "Flow"): (0.32, 0.18, 0.03, 2.50),
    ("Mean", "Speed"): MEASURED_MARGINALS["Mean_Speed_C"],
    ("Std", "Speed"): (11.00, 6.50, 0.40, 40.00),
    ("CV", "Speed"): MEASURED_MARGINALS["CV_Speed_U"],
    ("Mean", "Occupancy"): (14.00, 10.50, 0.30, 70.00),
    ("Std", "Occupancy"): MEASURED_MARGINALS["Std_Occupancy_C"],
    ("CV", "Occupancy"): (0.55, 0.30, 0.05, 2.80),
}


def default_marginals():
    out = {}
    for name in FEATURE_NAMES:
        stat, measure, _ = name.split("_")
        out[name] = MEASURED_MARGINALS.get(name, _GENERIC[(stat, measure)])
    return out


# latent shift of crash cases: slower, more erratic speeds and denser flow upstream of onset
DEFAULT_EFFECTS = {
    "Mean_Speed_C": -0.9,
    "CV_Speed_U": 0.7,
    "Mean_Flow_C": 0.5,
    "Std_Occupancy_C": 0.7,
}

# latent correlations between segments, between measures and between statistics;
# the full matrix is their Kronecker product (positive definite when each factor is)
DEFAULT_SEGMENT_CORR = [[1.0, 0.5, 0.3], [0.5, 1.0, 0.5], [0.3, 0.5, 1.0]]
DEFAULT_MEASURE_CORR = [[1.0, -0.2, 0.5], [-0.2, 1.0, -0.6], [0.5, -0.6, 1.0]]
DEFAULT_STAT_CORR = [[1.0, 0.3, -0.4], [0.3, 1.0, 0.6], [-0.4, 0.6, 1.0]]


@dataclass(frozen=True)
class SyntheticSpec:
    marginals: dict = field(default_factory=default_marginals)
    effects: dict = field(default_factory=lambda: dict(DEFAULT_EFFECTS))
    n_cases: int = 524
    controls_per_case: int = CONTROLS_PER_CASE
    segment_corr: list = field(default_factory=lambda: DEFAULT_SEGMENT_CORR)
    measure_corr: list = field(default_factory=lambda: DEFAULT_MEASURE_CORR)
    stat_corr: list = field(default_factory=lambda: DEFAULT_STAT_CORR)
    stratum_share: float = 0.3
    n_locations: int = 40

    def __post_init__(self):
        missing = set(FEATURE_NAMES) - set(self.marginals)
        if missing:
            raise ValueError(f"marginals missing for {sorted(missing)}")
        for name, (mean, std, lo, hi) in self.marginals.items():
            if not std > 0:
                raise ValueError(f"{name}: std must be positive")
            if not lo < mean < hi:
                raise ValueError(f"{name}: need min < mean < max")
        unknown = set(self.effects) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"effects name unknown features {sorted(unknown)}")
        if self.n_cases < 1 or self.controls_per_case < 0:
            raise ValueError("n_cases must be >= 1 and controls_per_case >= 0")
        if not 0.0 <= self.stratum_share < 1.0:
            raise ValueError("stratum_share must lie in [0, 1)")

    def effect_vector(self) -> np.ndarray:
        return np.array([float(self.effects.get(n, 0.0)) for n in FEATURE_NAMES])

    def correlation(self) -> np.ndarray:
        R = np.kron(np.asarray(self.segment_corr, float),
                    np.kron(np.asarray(self.measure_corr, float), np.asarray(self.stat_corr, float)))
        if R.shape != (len(FEATURE_NAMES),) * 2:
            raise ValueError("correlation factors must be 3 x 3")
        return R

    def to_dict(self):
        d = asdict(self)
        d["marginals"] = {k: list(v) for k, v in self.marginals.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "marginals" in d:
            base = default_marginals()
            base.update({k: tuple(v) for k, v in d["marginals"].items()})
            d["marginals"] = base
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def calibrate_truncnorm(mean, std, lo, hi):
    """``(loc, scale)`` of the normal whose restriction to [lo, hi] has this mean and std."""

    def resid(p):
        loc, scale = p[0], np.exp(p[1])
        m, v = stats.truncnorm.stats((lo - loc) / scale, (hi - loc) / scale, loc=loc, scale=scale,
                                     moments="mv")
        return [(m - mean) / std, (np.sqrt(v) - std) / std]

    sol = optimize.least_squares(resid, [mean, np.log(std)], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if np.max(np.abs(sol.fun)) > 1e-9:
        raise ValueError(f"no truncated normal on [{lo}, {hi}] has mean {mean} and std {std}")
    return float(sol.x[0]), float(np.exp(sol.x[1]))


@dataclass(frozen=True)
class GroundTruth:
    effects: dict
    loc: dict
    scale: dict
    seed: int
    spec: SyntheticSpec

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "effects": self.effects, "loc": self.loc,
                           "scale": self.scale, "spec": self.spec.to_dict()},
                          indent=2, sort_keys=True) + "\n"


def _latent_to_features(Z, params):
    X = np.empty_like(Z)
    for j, (loc, scale, lo, hi) in enumerate(params):
        a, b = (lo - loc) / scale, (hi - loc) / scale
        u = special.ndtr(Z[:, j])
        X[:, j] = np.clip(stats.truncnorm.ppf(u, a, b, loc=loc, scale=scale), lo, hi)
    return X


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0):
    """Returns ``(dataset, ground_truth)``; strata are numbered 0..n_cases-1."""
    names = FEATURE_NAMES
    delta = spec.effect_vector()
    if delta.size != len(names):
        raise ValueError("effect vector dimension mismatch")
    L = np.linalg.cholesky(spec.correlation())
    params, loc, scale = [], {}, {}
    for n in names:
        mean, std, lo, hi = spec.marginals[n]
        loc[n], scale[n] = calibrate_truncnorm(mean, std, lo, hi)
        params.append((loc[n], scale[n], lo, hi))

    feat_ss, meta_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(feat_ss)
    k = spec.controls_per_case
    n_rows = spec.n_cases * (1 + k)
    share = spec.stratum_share
    common = rng.standard_normal((spec.n_cases, len(names))) @ L.T
    own = rng.standard_normal((n_rows, len(names))) @ L.T
    strata = np.repeat(np.arange(spec.n_cases), 1 + k)
    labels = np.tile(np.r_[1, np.zeros(k, dtype=int)], spec.n_cases)
    Z = np.sqrt(share) * common[strata] + np.sqrt(1 - share) * own
    Z[labels == 1] += delta
    X = _latent_to_features(Z, params)

    # bookkeeping: a location and a 20-s clock slot per stratum, distinct control days
    meta = np.random.default_rng(meta_ss)
    window_end = np.empty(n_rows, dtype=np.int64)
    detectors = np.empty((n_rows, 3), dtype=object)
    for s in range(spec.n_cases):
        loc_id = int(meta.integers(spec.n_locations))
        clock = int(meta.integers(DAY_SECONDS // SLOT_SECONDS)) * SLOT_SECONDS
        days = meta.choice(np.arange(1, 366), size=1 + k, replace=False)
        rows = slice(s * (1 + k), (s + 1) * (1 + k))
        window_end[rows] = days * DAY_SECONDS + clock
        detectors[rows] = [f"{seg}{loc_id:03d}" for seg in SEGMENTS]
    ds = CaseControlDataset(X=X, labels=labels, strata=strata, window_end=window_end,
                            detectors=detectors.astype(str))
    truth = GroundTruth(effects={n: float(d) for n, d in zip(names, delta) if d != 0},
                        loc=loc, scale=scale, seed=seed, spec=spec)
    return ds, truth

