"""CSV reading and writing for detector records and case-control datasets.

Rows are validated one at a time; bad rows are skipped and reported with
their line number (the header is line 1).  A missing column is fatal.
"""
from __future__ import annotations

import contextlib
import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .._io import atomic_write_text, fmt
from .pipeline import CaseControlDataset
from .records import FEATURE_NAMES, SLOT_SECONDS, DataError, DetectorRecords

DETECTOR_COLUMNS = ("detector_id", "timestamp", "lane", "flow", "speed", "occupancy")
CASE_CONTROL_COLUMNS = (("stratum_id", "label") + FEATURE_NAMES
                        + ("window_end", "detector_u", "detector_c", "detector_d"))


@dataclass
class RowErrors:
    errors: list = field(default_factory=list)  # (line number, message)

    def add(self, line, message):
        self.errors.append((line, message))

    def __len__(self):
        return len(self.errors)

    def __bool__(self):
        return bool(self.errors)

    def format(self) -> str:
        return "\n".join(f"line {ln}: {msg}" for ln, msg in self.errors)


def parse_timestamp(text: str) -> int:
    """Epoch seconds, or ISO-8601 (naive times are taken as UTC)."""
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        try:
            dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
        except ValueError:
            raise ValueError(f"bad timestamp {text!r}") from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        value = dt.timestamp()
    if not math.isfinite(value) or value != int(value):
        raise ValueError(f"timestamp {text!r} is not a whole second")
    return int(value)


def _finite(text, name):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"{name} is not finite")
    return v


def _reader(fh, required):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("file is empty (no header row)") from None
    header = [h.strip() for h in header]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"missing columns: {', '.join(missing)}")
    return reader, {c: header.index(c) for c in required}, len(header)


def _check_budget(report, max_errors):
    if max_errors is not None and len(report) > max_errors:
        raise DataError(f"more than {max_errors} invalid rows:\n{report.format()}")


def _detector_row(row, col):
    ts = parse_timestamp(row[col["timestamp"]])
    if ts % SLOT_SECONDS:
        raise ValueError(f"timestamp {ts} is not on the {SLOT_SECONDS}-s grid")
    flow = _finite(row[col["flow"]], "flow")
    speed = _finite(row[col["speed"]], "speed")
    occ = _finite(row[col["occupancy"]], "occupancy")
    if flow < 0:
        raise ValueError(f"flow {flow} is negative")
    if speed < 0:
        raise ValueError(f"speed {speed} is negative")
    if not 0 <= occ <= 100:
        raise ValueError(f"occupancy {occ} outside [0, 100]")
    det = row[col["detector_id"]].strip()
    if not det:
        raise ValueError("empty detector_id")
    return det, ts, row[col["lane"]].strip(), flow, speed, occ


def read_detector_csv(path_or_text, max_errors=None):
    """Returns ``(DetectorRecords, RowErrors)``."""
    cols = [[] for _ in DETECTOR_COLUMNS]
    report = RowErrors()
    with _open(path_or_text) as fh:
        reader, col, width = _reader(fh, DETECTOR_COLUMNS)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                if len(row) != width:
                    raise ValueError(f"expected {width} fields, got {len(row)}")
                values = _detector_row(row, col)
            except ValueError as exc:
                report.add(line, str(exc))
                _check_budget(report, max_errors)
                continue
            for c, v in zip(cols, values):
                c.append(v)
    recs = DetectorRecords.from_columns(*cols, validate=False)
    return recs, report


def detector_csv(records: DetectorRecords) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETECTOR_COLUMNS)
    for i in range(len(records)):
        w.writerow([records.detector_id[i], int(records.timestamp[i]), records.lane[i],
                    fmt(records.flow[i]), fmt(records.speed[i]), fmt(records.occupancy[i])])
    return buf.getvalue()


def write_detector_csv(records, path):
    return atomic_write_text(path, detector_csv(records))


def case_control_csv(ds: CaseControlDataset) -> str:
    if tuple(ds.feature_names) != FEATURE_NAMES:
        raise DataError("only full 27-feature datasets can be written")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CASE_CONTROL_COLUMNS)
    for i in range(len(ds)):
        w.writerow([int(ds.strata[i]), int(ds.labels[i]), *(fmt(v) for v in ds.X[i]),
                    int(ds.window_end[i]), *ds.detectors[i]])
    return buf.getvalue()


def write_case_control_csv(ds, path):
    return atomic_write_text(path, case_control_csv(ds))


def read_case_control_csv(path_or_text, max_errors=None):
    """Returns ``(CaseControlDataset, RowErrors)``."""
    strata, labels, X, ends, dets = [], [], [], [], []
    report = RowErrors()
    with _open(path_or_text) as fh:
        reader, col, width = _reader(fh, CASE_CONTROL_COLUMNS)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                if len(row) != width:
                    raise ValueError(f"expected {width} fields, got {len(row)}")
                label = int(row[col["label"]])
                if label not in (0, 1):
                    raise ValueError(f"label {label} is not 0 or 1")
                feats = [_finite(row[col[n]], n) for n in FEATURE_NAMES]
                rec = (int(row[col["stratum_id"]]), label, feats,
                       parse_timestamp(row[col["window_end"]]),
                       [row[col[c]].strip() for c in ("detector_u", "detector_c", "detector_d")])
            except ValueError as exc:
                report.add(line, str(exc))
                _check_budget(report, max_errors)
                continue
            strata.append(rec[0])
            labels.append(rec[1])
            X.append(rec[2])
            ends.append(rec[3])
            dets.append(rec[4])
    ds = CaseControlDataset(X=np.array(X, dtype=float).reshape(-1, len(FEATURE_NAMES)),
                            labels=np.array(labels, dtype=int), strata=np.array(strata, dtype=int),
                            window_end=np.array(ends, dtype=np.int64),
                            detectors=np.array(dets, dtype=str).reshape(-1, 3))
    return ds, report


def _open(src):
    """Accept a path or an already-open text stream."""
    if hasattr(src, "read"):
        return contextlib.nullcontext(src)
    try:
        return open(src, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {src}: {exc}") from exc
