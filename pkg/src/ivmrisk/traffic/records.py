"""Detector record container and the 27 window-feature names."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEGMENTS = ("U", "C", "D")
MEASURES = ("Flow", "Speed", "Occupancy")
STATS = ("Mean", "Std", "CV")

# segment-major, then measure, then statistic
FEATURE_NAMES = tuple(f"{s}_{m}_{seg}" for seg in SEGMENTS for m in MEASURES for s in STATS)

SLOT_SECONDS = 20
WINDOW_SECONDS = 300
SLOTS_PER_WINDOW = WINDOW_SECONDS // SLOT_SECONDS
DAY_SECONDS = 86_400


class DataError(ValueError):
    """Input data violate a documented schema or invariant."""


def feature_index(name: str) -> int:
    try:
        return FEATURE_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown feature {name!r}") from None


@dataclass(frozen=True)
class DetectorRecords:
    """Column-oriented 20-second lane records.

    ``timestamp`` is integer epoch seconds on the 20-s grid; ``flow`` is
    vehicles per lane per 20 s, ``speed`` km/h, ``occupancy`` percent.
    """

    detector_id: np.ndarray
    timestamp: np.ndarray
    lane: np.ndarray
    flow: np.ndarray
    speed: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        n = len(self.timestamp)
        for name in ("detector_id", "lane", "flow", "speed", "occupancy"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def from_columns(cls, detector_id, timestamp, lane, flow, speed, occupancy, validate=True):
        rec = cls(detector_id=np.asarray(detector_id, dtype=str),
                  timestamp=np.asarray(timestamp, dtype=np.int64),
                  lane=np.asarray(lane, dtype=str),
                  flow=np.asarray(flow, dtype=float),
                  speed=np.asarray(speed, dtype=float),
                  occupancy=np.asarray(occupancy, dtype=float))
        if validate:
            bad = record_violations(rec.timestamp, rec.flow, rec.speed, rec.occupancy)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DataError(f"record {i} violates detector invariants")
        return rec

    @classmethod
    def empty(cls):
        return cls.from_columns([], [], [], [], [], [])

    def __len__(self):
        return len(self.timestamp)

    def take(self, idx):
        return DetectorRecords(*(getattr(self, f)[idx] for f in
                                 ("detector_id", "timestamp", "lane", "flow", "speed", "occupancy")))

    @staticmethod
    def concat(parts):
        parts = list(parts)
        if not parts:
            return DetectorRecords.empty()
        return DetectorRecords(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                 ("detector_id", "timestamp", "lane", "flow", "speed", "occupancy")))


def record_violations(timestamp, flow, speed, occupancy):
    """Boolean mask of rows breaking the grid, sign or range invariants."""
    ts = np.asarray(timestamp)
    flow = np.asarray(flow, dtype=float)
    speed = np.asarray(speed, dtype=float)
    occ = np.asarray(occupancy, dtype=float)
    ok = (ts % SLOT_SECONDS == 0) & np.isfinite(flow) & np.isfinite(speed) & np.isfinite(occ)
    ok &= (flow >= 0) & (speed >= 0) & (occ >= 0) & (occ <= 100)
    return ~ok
