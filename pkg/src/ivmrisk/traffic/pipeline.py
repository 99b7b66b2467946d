"""Matched case-control assembly: crash windows, control sampling and the split."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregate import (FLOW_WEIGHTED, MIN_RECORDS, FeatureWindow, IncompleteWindowError,
                        aggregate_window, as_index)
from .records import DAY_SECONDS, FEATURE_NAMES, SLOT_SECONDS, WINDOW_SECONDS, DataError

log = logging.getLogger(__name__)

# the last five minutes before a reported crash are skipped
CRASH_OFFSET_SECONDS = 300
CONTROLS_PER_CASE = 4


def case_window_bounds(crash_time: int):
    """``(start, end)`` of the feature window for a crash at ``crash_time``."""
    end = int(crash_time) - CRASH_OFFSET_SECONDS
    return end - WINDOW_SECONDS, end


def extract_case_window(records, detector_triplet, crash_time: int, **kw) -> FeatureWindow:
    if int(crash_time) % SLOT_SECONDS:
        raise ValueError(f"crash time {crash_time} is not on the {SLOT_SECONDS}-s grid")
    _, end = case_window_bounds(crash_time)
    return aggregate_window(records, detector_triplet, end, **kw)


def day_of(timestamp: int) -> int:
    return int(timestamp) // DAY_SECONDS


@dataclass(frozen=True)
class ControlMatch:
    windows: list
    days: list
    requested: int

    @property
    def short(self) -> bool:
        return len(self.windows) < self.requested


def match_controls(records, detector_triplet, window_end: int, candidate_days, n=CONTROLS_PER_CASE,
                   seed=0, rng=None, **kw) -> ControlMatch:
    """Sample ``n`` crash-free days and aggregate the same clock window on each.

    Days are visited in a seeded random order and the first ``n`` with
    complete data are kept, which is a uniform draw without replacement
    from the days that have complete data.
    """
    index = as_index(records)
    rng = np.random.default_rng(seed) if rng is None else rng
    days = sorted({int(d) for d in candidate_days})
    clock = int(window_end) % DAY_SECONDS
    windows, chosen = [], []
    for k in rng.permutation(len(days)):
        if len(windows) == n:
            break
        end = days[k] * DAY_SECONDS + clock
        try:
            windows.append(aggregate_window(index, detector_triplet, end, **kw))
            chosen.append(days[k])
        except IncompleteWindowError:
            continue
    match = ControlMatch(windows=windows, days=chosen, requested=n)
    if match.short:
        log.warning("only %d of %d controls available for window ending %d",
                    len(windows), n, int(window_end))
    return match


@dataclass(frozen=True)
class CrashEvent:
    time: int
    detectors: tuple  # (U, C, D)


@dataclass(frozen=True)
class CaseControlDataset:
    X: np.ndarray  # (n, 27) in FEATURE_NAMES order
    labels: np.ndarray
    strata: np.ndarray
    window_end: np.ndarray
    detectors: np.ndarray  # (n, 3) strings
    selected_features: tuple = ()
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        n = self.labels.size
        if self.X.shape != (n, len(self.feature_names)):
            raise DataError(f"X has shape {self.X.shape}, expected ({n}, {len(self.feature_names)})")
        for name in ("strata", "window_end"):
            if getattr(self, name).size != n:
                raise DataError(f"{name} has the wrong length")
        if self.detectors.shape != (n, 3):
            raise DataError("detectors must be (n, 3)")
        unknown = set(self.selected_features) - set(self.feature_names)
        if unknown:
            raise DataError(f"unknown selected features {sorted(unknown)}")

    def __len__(self):
        return self.labels.size

    @property
    def n_cases(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_controls(self) -> int:
        return int(np.sum(self.labels == 0))

    @property
    def stratum_ids(self) -> np.ndarray:
        return np.unique(self.strata)

    def controls_per_stratum(self) -> dict:
        ids, counts = np.unique(self.strata[self.labels == 0], return_counts=True)
        out = {int(s): 0 for s in self.stratum_ids}
        out.update({int(s): int(c) for s, c in zip(ids, counts)})
        return out

    def short_strata(self, expected=CONTROLS_PER_CASE):
        return sorted(s for s, c in self.controls_per_stratum().items() if c < expected)

    def cv_flagged(self) -> np.ndarray:
        """Rows where some CV was set to 0 because its mean was 0."""
        flagged = np.zeros(len(self), dtype=bool)
        for j, name in enumerate(self.feature_names):
            if name.startswith("Mean_"):
                flagged |= self.X[:, j] == 0
        return flagged

    def subset(self, mask) -> "CaseControlDataset":
        mask = np.asarray(mask)
        return replace(self, X=self.X[mask], labels=self.labels[mask], strata=self.strata[mask],
                       window_end=self.window_end[mask], detectors=self.detectors[mask])

    def with_selection(self, names) -> "CaseControlDataset":
        return replace(self, selected_features=tuple(names))

    def matrix(self, names=None) -> np.ndarray:
        names = self.selected_features if names is None else names
        if not names:
            return self.X
        return self.X[:, [self.feature_names.index(n) for n in names]]

    @staticmethod
    def from_windows(rows, selected_features=()):
        """``rows`` holds (FeatureWindow, label, stratum_id) triples."""
        if not rows:
            raise DataError("no observations")
        return CaseControlDataset(
            X=np.vstack([w.values for w, _, _ in rows]),
            labels=np.array([lab for _, lab, _ in rows], dtype=int),
            strata=np.array([s for _, _, s in rows], dtype=int),
            window_end=np.array([w.window_end for w, _, _ in rows], dtype=np.int64),
            detectors=np.array([w.detector_ids for w, _, _ in rows], dtype=str).reshape(-1, 3),
            selected_features=tuple(selected_features))


@dataclass
class BuildReport:
    dropped_cases: list = field(default_factory=list)  # (crash index, slot-count report)
    short_strata: list = field(default_factory=list)  # (stratum id, controls found)


def crash_free_days(crashes, detector_c, all_days):
    bad = {day_of(c.time) for c in crashes if c.detectors[1] == detector_c}
    return [d for d in all_days if d not in bad]


def build_case_control(records, crashes, n_controls=CONTROLS_PER_CASE, seed=0,
                       min_records=MIN_RECORDS, speed_weighting=FLOW_WEIGHTED, days=None):
    """Assemble one stratum per crash with complete case data.

    Control days are all days in ``days`` (default: every day covered by
    the records) without a crash at the same crash-segment detector.
    Each stratum draws from its own stream spawned off ``seed``.
    """
    index = as_index(records)
    if days is None:
        lo, hi = index.time_range()
        days = range(day_of(lo), day_of(hi) + 1)
    days = list(days)
    kw = dict(min_records=min_records, speed_weighting=speed_weighting)
    rows = []
    report = BuildReport()
    streams = np.random.SeedSequence(seed).spawn(len(crashes))
    for k, crash in enumerate(crashes):
        try:
            case = extract_case_window(index, crash.detectors, crash.time, **kw)
        except IncompleteWindowError as exc:
            log.info("dropping crash %d: %s", k, exc)
            report.dropped_cases.append((k, exc.report))
            continue
        candidates = crash_free_days(crashes, crash.detectors[1], days)
        match = match_controls(index, crash.detectors, case.window_end, candidates, n=n_controls,
                               rng=np.random.default_rng(streams[k]), **kw)
        if match.short:
            report.short_strata.append((k, len(match.windows)))
        rows.append((case, 1, k))
        rows += [(w, 0, k) for w in match.windows]
    return CaseControlDataset.from_windows(rows), report


def train_test_split(dataset: CaseControlDataset, train_fraction=0.7, seed=0):
    """Split by stratum so a case and its controls stay on one side."""
    ids = dataset.stratum_ids
    if ids.size < 2:
        raise ValueError("need at least two strata to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = min(max(int(round(train_fraction * ids.size)), 1), ids.size - 1)
    perm = np.random.default_rng(seed).permutation(ids.size)
    train_ids = ids[np.sort(perm[:n_train])]
    in_train = np.isin(dataset.strata, train_ids)
    return dataset.subset(in_train), dataset.subset(~in_train)
