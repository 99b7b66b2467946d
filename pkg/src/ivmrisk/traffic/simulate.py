"""Record-level loop-detector simulator for exercising the window pipeline.

Each location has U, C and D detectors with a few lanes.  Flow follows a
two-peak daily demand profile (Poisson counts per 20 s), speed drops as
demand approaches capacity, and occupancy follows from flow and speed.
Before each simulated crash the C and U detectors slow down and become
more erratic for fifteen minutes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import CrashEvent
from .records import DAY_SECONDS, SLOT_SECONDS, DetectorRecords

SLOTS_PER_DAY = DAY_SECONDS // SLOT_SECONDS
VEHICLE_LENGTH_M = 6.0
PRECURSOR_SECONDS = 900


@dataclass(frozen=True)
class MonthSpec:
    n_locations: int = 2
    n_days: int = 30
    lanes: int = 2
    crashes_per_location: int = 3
    first_day: int = 17_897  # 2019-01-01 in days since the epoch
    missing: tuple = ()  # (detector id, day index) pairs with no data


def triplet(location: int):
    return (f"U{location:03d}", f"C{location:03d}", f"D{location:03d}")


def _demand(t):
    """Mean vehicles per lane per 20 s at clock time ``t`` (seconds)."""
    h = t / 3600.0
    return 1.0 + 5.5 * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2) + 5.0 * np.exp(-0.5 * ((h - 17.5) / 2.0) ** 2)


def _detector_day(rng, t, lanes, slow=None):
    lam = _demand(t)
    flow = rng.poisson(np.repeat(lam[:, None], lanes, axis=1)).astype(float)
    load = np.clip(lam / 8.0, 0, 1.2)
    base = 95.0 * (1 - 0.55 * load ** 3)
    speed = base[:, None] + rng.normal(0, 3.0, size=flow.shape)
    if slow is not None:
        speed[slow] = speed[slow] * 0.65 + rng.normal(0, 8.0, size=(int(slow.sum()), lanes))
    speed = np.clip(speed, 5.0, 130.0)
    occ = flow * VEHICLE_LENGTH_M / (speed / 3.6 * SLOT_SECONDS) * 100.0
    occ = np.clip(occ + rng.normal(0, 0.5, size=flow.shape), 0.0, 100.0)
    return flow, speed, occ


def simulate_month(spec: MonthSpec = MonthSpec(), seed: int = 0):
    """Returns ``(DetectorRecords, crashes)`` with crashes on whole minutes."""
    root = np.random.SeedSequence(seed)
    crash_ss, data_ss = root.spawn(2)
    crng = np.random.default_rng(crash_ss)
    crashes = []
    for loc in range(spec.n_locations):
        days = crng.choice(spec.n_days, size=min(spec.crashes_per_location, spec.n_days), replace=False)
        for d in sorted(days):
            minute = int(crng.integers(6 * 60, 22 * 60))
            crashes.append(CrashEvent(time=(spec.first_day + int(d)) * DAY_SECONDS + minute * 60,
                                      detectors=triplet(loc)))
    missing = {(str(det), int(day)) for det, day in spec.missing}
    t = np.arange(SLOTS_PER_DAY) * SLOT_SECONDS
    lanes = [str(k + 1) for k in range(spec.lanes)]
    parts = []
    det_streams = data_ss.spawn(spec.n_locations * 3)
    for loc in range(spec.n_locations):
        for k, det in enumerate(triplet(loc)):
            rng = np.random.default_rng(det_streams[3 * loc + k])
            for d in range(spec.n_days):
                day0 = (spec.first_day + d) * DAY_SECONDS
                slow = None
                if k < 2:
                    for c in crashes:
                        if c.detectors[1] == triplet(loc)[1] and day0 <= c.time < day0 + DAY_SECONDS:
                            rel = c.time - day0
                            hit = (t >= rel - PRECURSOR_SECONDS) & (t < rel)
                            slow = hit if slow is None else slow | hit
                flow, speed, occ = _detector_day(rng, t, spec.lanes, slow)
                if (det, d) in missing:
                    continue
                n = flow.size
                parts.append(DetectorRecords(
                    detector_id=np.full(n, det), timestamp=np.repeat(day0 + t, spec.lanes),
                    lane=np.tile(lanes, SLOTS_PER_DAY), flow=flow.ravel(), speed=speed.ravel(),
                    occupancy=occ.ravel()))
    return DetectorRecords.concat(parts), crashes
