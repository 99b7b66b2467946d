"""Five-minute window features from 20-second lane records.

Lane values are first combined per 20-s slot (flow and occupancy as lane
means, speed as the flow-weighted lane mean), then Mean, Std (n - 1
denominator) and CV = Std / Mean are taken over the slots of each segment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import (FEATURE_NAMES, MEASURES, SEGMENTS, SLOTS_PER_WINDOW, WINDOW_SECONDS,
                      DataError, DetectorRecords)

FLOW_WEIGHTED = "flow"
ARITHMETIC = "arithmetic"
MIN_RECORDS = 10


class IncompleteWindowError(DataError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = dict(report)


class RecordIndex:
    """Records grouped per detector and sorted by time for fast window slicing."""

    def __init__(self, records: DetectorRecords):
        self._by_det = {}
        if len(records) == 0:
            return
        order = np.lexsort((records.timestamp, records.detector_id))
        det = records.detector_id[order]
        cuts = np.flatnonzero(det[1:] != det[:-1]) + 1
        for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, det.size]):
            idx = order[lo:hi]
            self._by_det[str(det[lo])] = (records.timestamp[idx], records.flow[idx],
                                          records.speed[idx], records.occupancy[idx])

    @property
    def detectors(self):
        return sorted(self._by_det)

    def time_range(self):
        lo = min(v[0][0] for v in self._by_det.values())
        hi = max(v[0][-1] for v in self._by_det.values())
        return int(lo), int(hi)

    def window(self, detector, start, end):
        """Raw rows of ``detector`` with ``start <= timestamp < end``."""
        if detector not in self._by_det:
            empty = np.empty(0)
            return np.empty(0, np.int64), empty, empty, empty
        ts, flow, speed, occ = self._by_det[detector]
        lo, hi = np.searchsorted(ts, [start, end], side="left")
        return ts[lo:hi], flow[lo:hi], speed[lo:hi], occ[lo:hi]


def as_index(records) -> RecordIndex:
    return records if isinstance(records, RecordIndex) else RecordIndex(records)


def lane_average(ts, flow, speed, occ, speed_weighting=FLOW_WEIGHTED):
    """Collapse lanes to one (flow, speed, occupancy) triple per 20-s slot."""
    slots, inv = np.unique(ts, return_inverse=True)
    nl = np.bincount(inv, minlength=slots.size).astype(float)
    f = np.bincount(inv, weights=flow, minlength=slots.size)
    o = np.bincount(inv, weights=occ, minlength=slots.size)
    s_plain = np.bincount(inv, weights=speed, minlength=slots.size) / nl
    if speed_weighting == FLOW_WEIGHTED:
        fs = np.bincount(inv, weights=flow * speed, minlength=slots.size)
        s = np.where(f > 0, fs / np.where(f > 0, f, 1.0), s_plain)
    elif speed_weighting == ARITHMETIC:
        s = s_plain
    else:
        raise ValueError(f"unknown speed weighting {speed_weighting!r}")
    return slots, f / nl, s, o / nl


def series_stats(values):
    """(mean, sample std, cv, cv_flag); cv is 0 and flagged when the mean is 0."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two slots for a sample standard deviation")
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1))
    if mean > 0:
        return mean, std, std / mean, False
    return mean, std, 0.0, True


@dataclass(frozen=True)
class FeatureWindow:
    values: np.ndarray  # in FEATURE_NAMES order
    window_end: int
    detector_ids: tuple
    slot_counts: tuple = (SLOTS_PER_WINDOW,) * 3
    cv_flags: tuple = field(default_factory=tuple)  # names of CV features set to 0

    def __getitem__(self, name):
        return float(self.values[FEATURE_NAMES.index(name)])

    @property
    def flagged(self) -> bool:
        return bool(self.cv_flags)

    def as_dict(self):
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def aggregate_window(records, detector_triplet, window_end: int, min_records: int = MIN_RECORDS,
                     speed_weighting: str = FLOW_WEIGHTED) -> FeatureWindow:
    """Features of the interval ``[window_end - 300 s, window_end)`` for (U, C, D)."""
    if len(detector_triplet) != 3:
        raise ValueError("detector_triplet must hold (U, C, D) detector ids")
    if min_records < 2:
        raise ValueError("min_records must be >= 2")
    index = as_index(records)
    start = int(window_end) - WINDOW_SECONDS
    values = []
    counts = []
    flags = []
    series = []
    for seg, det in zip(SEGMENTS, detector_triplet):
        ts, flow, speed, occ = index.window(str(det), start, int(window_end))
        slots, f, s, o = lane_average(ts, flow, speed, occ, speed_weighting)
        counts.append(int(slots.size))
        series.append((seg, (f, s, o)))
    if min(counts) < min_records:
        report = dict(zip(SEGMENTS, counts))
        raise IncompleteWindowError(
            f"window ending {int(window_end)} has slot counts {report}, need {min_records}", report)
    for seg, triple in series:
        for measure, v in zip(MEASURES, triple):
            mean, std, cv, flag = series_stats(v)
            values += [mean, std, cv]
            if flag:
                flags.append(f"CV_{measure}_{seg}")
    return FeatureWindow(values=np.array(values), window_end=int(window_end),
                         detector_ids=tuple(str(d) for d in detector_triplet),
                         slot_counts=tuple(counts), cv_flags=tuple(flags))
