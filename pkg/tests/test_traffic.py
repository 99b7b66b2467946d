import csv
import io
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ivmrisk.evaluation import auc
from ivmrisk.ivm import IvmConfig, fit_ivm
from ivmrisk.kernels import KernelSpec
from ivmrisk.traffic.aggregate import (ARITHMETIC, IncompleteWindowError, RecordIndex,
                                       aggregate_window, series_stats)
from ivmrisk.traffic.csvio import (case_control_csv, detector_csv, read_case_control_csv,
                                   read_detector_csv)
from ivmrisk.traffic.pipeline import (CaseControlDataset, build_case_control,
                                      case_window_bounds, extract_case_window, match_controls,
                                      train_test_split)
from ivmrisk.traffic.records import FEATURE_NAMES, DataError, DetectorRecords
from ivmrisk.traffic.simulate import MonthSpec, simulate_month
from ivmrisk.traffic.synthetic import (MEASURED_MARGINALS, SyntheticSpec, calibrate_truncnorm,
                                       generate_synthetic)

DATA = Path(__file__).parent / "data"
TRIPLET = ("U7", "C7", "D7")


def utc(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp())


def clock(ts):
    return datetime.fromtimestamp(ts, timezone.utc).strftime("%Y-%m-%d %H:%M")


def constant_records(det, start, n_slots, flow=4.0, speed=60.0, occ=10.0, lanes=2):
    ts = start + 20 * np.arange(n_slots)
    n = n_slots * lanes
    return DetectorRecords.from_columns(
        np.full(n, det), np.repeat(ts, lanes), np.tile([str(k) for k in range(lanes)], n_slots),
        np.full(n, flow), np.full(n, speed), np.full(n, occ))


# ---- window arithmetic -------------------------------------------------------------


def test_feature_names():
    assert len(FEATURE_NAMES) == 27 and len(set(FEATURE_NAMES)) == 27
    assert FEATURE_NAMES[0] == "Mean_Flow_U" and FEATURE_NAMES[-1] == "CV_Occupancy_D"
    for name in MEASURED_MARGINALS:
        assert name in FEATURE_NAMES


@pytest.mark.parametrize("crash, start, end", [
    ((2019, 3, 4, 14, 0), "2019-03-04 13:50", "2019-03-04 13:55"),
    ((2019, 3, 4, 15, 25), "2019-03-04 15:15", "2019-03-04 15:20"),
    ((2019, 3, 5, 0, 7), "2019-03-04 23:57", "2019-03-05 00:02"),
])
def test_case_window_clock(crash, start, end):
    lo, hi = case_window_bounds(utc(*crash))
    assert (clock(lo), clock(hi)) == (start, end)


@given(st.integers(0, 10 ** 6))
def test_window_end_is_300_s_before_crash(k):
    crash = 20 * k
    lo, hi = case_window_bounds(crash)
    assert hi - crash == -300 and hi - lo == 300


def test_extract_case_window_uses_offset_window():
    crash = utc(2019, 3, 4, 14, 0)
    lo, _ = case_window_bounds(crash)
    recs = DetectorRecords.concat([constant_records(d, lo, 15) for d in TRIPLET]
                                  + [constant_records(d, lo + 300, 15, speed=5.0) for d in TRIPLET])
    w = extract_case_window(recs, TRIPLET, crash)
    assert w.window_end == utc(2019, 3, 4, 13, 55)
    assert w["Mean_Speed_C"] == 60.0
    with pytest.raises(ValueError):
        extract_case_window(recs, TRIPLET, crash + 7)


# ---- aggregation ------------------------------------------------------------------


def test_constant_speed():
    recs = DetectorRecords.concat([constant_records(d, 0, 15) for d in TRIPLET])
    w = aggregate_window(recs, TRIPLET, 300)
    assert (w["Mean_Speed_C"], w["Std_Speed_C"], w["CV_Speed_C"]) == (60.0, 0.0, 0.0)
    assert not w.flagged


def test_three_slot_speeds():
    parts = [constant_records(d, 0, 3) for d in TRIPLET]
    speeds = np.repeat([50.0, 60.0, 70.0], 2)
    parts[1] = DetectorRecords.from_columns(parts[1].detector_id, parts[1].timestamp,
                                            parts[1].lane, parts[1].flow, speeds,
                                            parts[1].occupancy)
    w = aggregate_window(DetectorRecords.concat(parts), TRIPLET, 300, min_records=3)
    assert w["Mean_Speed_C"] == pytest.approx(60.0, abs=1e-12)
    assert w["Std_Speed_C"] == pytest.approx(10.0, abs=1e-12)
    assert w["CV_Speed_C"] == pytest.approx(1 / 6, abs=1e-12)


def test_series_stats_sample_std():
    mean, std, cv, flag = series_stats([1.0, 2.0, 3.0, 4.0])
    assert std == pytest.approx(np.sqrt(5 / 3), abs=1e-15)
    assert not flag
    assert series_stats([0.0, 0.0])[2:] == (0.0, True)


def test_zero_flow_sets_cv_flag():
    parts = [constant_records(d, 0, 15) for d in TRIPLET]
    parts[2] = constant_records("D7", 0, 15, flow=0.0, occ=0.0)
    w = aggregate_window(DetectorRecords.concat(parts), TRIPLET, 300)
    assert set(w.cv_flags) == {"CV_Flow_D", "CV_Occupancy_D"}
    assert w["CV_Flow_D"] == 0.0


def test_flow_weighted_speed_and_switch():
    recs = DetectorRecords.from_columns(
        ["C"] * 4, [0, 0, 20, 20], ["1", "2", "1", "2"],
        [3.0, 1.0, 0.0, 0.0], [80.0, 40.0, 50.0, 70.0], [5.0, 5.0, 5.0, 5.0])
    other = [constant_records(d, 0, 2) for d in ("U", "D")]
    all_recs = DetectorRecords.concat([other[0], recs, other[1]])
    w = aggregate_window(all_recs, ("U", "C", "D"), 40, min_records=2)
    # slot 0: (3*80 + 1*40) / 4 = 70; slot 1 has no flow: plain mean 60
    assert w["Mean_Speed_C"] == pytest.approx(65.0)
    w2 = aggregate_window(all_recs, ("U", "C", "D"), 40, min_records=2, speed_weighting=ARITHMETIC)
    assert w2["Mean_Speed_C"] == pytest.approx(60.0)


def test_incomplete_window_rejected_with_report():
    recs = DetectorRecords.concat([constant_records("U7", 0, 15), constant_records("C7", 0, 9),
                                   constant_records("D7", 0, 15)])
    with pytest.raises(IncompleteWindowError) as exc:
        aggregate_window(recs, TRIPLET, 300)
    assert exc.value.report == {"U": 15, "C": 9, "D": 15}
    # 10 of 15 is the default floor
    recs = DetectorRecords.concat([constant_records("U7", 0, 15), constant_records("C7", 0, 10),
                                   constant_records("D7", 0, 15)])
    assert aggregate_window(recs, TRIPLET, 300).slot_counts == (15, 10, 15)


def test_golden_window_matches_desk_calculation():
    recs, errors = read_detector_csv(DATA / "golden_records.csv")
    assert not errors
    expected = {row["feature"]: float(row["value"])
                for row in csv.DictReader(open(DATA / "golden_features.csv"))}
    w = aggregate_window(recs, TRIPLET, 1551707700)
    assert w.slot_counts == (15, 15, 15)
    got = w.as_dict()
    assert list(expected) == list(FEATURE_NAMES)
    for name in FEATURE_NAMES:
        assert abs(got[name] - expected[name]) <= 1e-9, name


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 20.0), min_size=15, max_size=15),
       st.lists(st.floats(1.0, 120.0), min_size=15, max_size=15))
def test_cv_consistency(flows, speeds):
    recs = DetectorRecords.from_columns(["C"] * 15, 20 * np.arange(15), ["1"] * 15, flows, speeds,
                                        [5.0] * 15)
    other = [constant_records(d, 0, 15) for d in ("U", "D")]
    w = aggregate_window(DetectorRecords.concat([other[0], recs, other[1]]), ("U", "C", "D"), 300)
    for m in ("Flow", "Speed", "Occupancy"):
        mean, std, cv = (w[f"{s}_{m}_C"] for s in ("Mean", "Std", "CV"))
        if mean > 0:
            assert abs(cv - std / mean) <= 1e-12


# ---- matching and assembly ------------------------------------------------------------


def days_of_constant_data(days, clock_end, speed_of_day=lambda d: 60.0):
    parts = []
    for d in days:
        start = d * 86400 + clock_end - 300
        parts += [constant_records(det, start, 15, speed=speed_of_day(d)) for det in TRIPLET]
    return DetectorRecords.concat(parts)


def test_match_controls_deterministic_distinct_days():
    days = list(range(100, 110))
    recs = RecordIndex(days_of_constant_data(days, 50_000, speed_of_day=float))
    a = match_controls(recs, TRIPLET, 99 * 86400 + 50_000, days, n=4, seed=3)
    b = match_controls(recs, TRIPLET, 99 * 86400 + 50_000, days, n=4, seed=3)
    assert a.days == b.days and len(set(a.days)) == 4 and not a.short
    # each control is the identical clock window on its own day
    for day, w in zip(a.days, a.windows):
        assert w.window_end == day * 86400 + 50_000 and w["Mean_Speed_C"] == day
    c = match_controls(recs, TRIPLET, 99 * 86400 + 50_000, days, n=4, seed=4)
    assert c.days != a.days


def test_match_controls_shortfall():
    days = [200, 201, 202]
    recs = days_of_constant_data(days, 40_000)
    m = match_controls(recs, TRIPLET, 199 * 86400 + 40_000, days, n=4, seed=0)
    assert len(m.windows) == 3 and m.short


def test_match_controls_skips_incomplete_days():
    days = [300, 301, 302, 303, 304]
    recs = days_of_constant_data(days[:3], 30_000)
    m = match_controls(recs, TRIPLET, 299 * 86400 + 30_000, days, n=4, seed=1)
    assert sorted(m.days) == days[:3] and m.short


def test_simulated_month_pipeline():
    recs, crashes = simulate_month(MonthSpec(n_locations=2, n_days=20, crashes_per_location=3), seed=5)
    ds, report = build_case_control(recs, crashes, seed=5)
    assert ds.n_cases == len(crashes) == len(ds.stratum_ids)
    assert all(c == 4 for c in ds.controls_per_stratum().values())
    assert not report.short_strata and not report.dropped_cases
    # precursor slowdown shows up in the crash-segment speed
    j = FEATURE_NAMES.index("Mean_Speed_C")
    assert ds.X[ds.labels == 1, j].mean() < ds.X[ds.labels == 0, j].mean()
    again, _ = build_case_control(recs, crashes, seed=5)
    np.testing.assert_array_equal(ds.X, again.X)


def test_simulated_month_with_gaps_flags_short_strata():
    base = MonthSpec(n_locations=1, n_days=5, crashes_per_location=1)
    _, crashes = simulate_month(base, seed=1)
    crash_day = crashes[0].time // 86400 - base.first_day
    others = [d for d in range(5) if d != crash_day]
    # C000 silent on all but one crash-free day: one control instead of four
    spec = MonthSpec(n_locations=1, n_days=5, crashes_per_location=1,
                     missing=tuple(("C000", d) for d in others[1:]))
    recs, crashes2 = simulate_month(spec, seed=1)
    assert crashes2 == crashes
    ds, report = build_case_control(recs, crashes, seed=1)
    assert report.short_strata == [(0, 1)]
    assert ds.short_strata() == [0] and ds.n_controls == 1
    # dropping the crash day itself drops the case
    spec = MonthSpec(n_locations=1, n_days=5, crashes_per_location=1, missing=(("C000", crash_day),))
    recs, _ = simulate_month(spec, seed=1)
    with pytest.raises(DataError):
        build_case_control(recs, crashes, seed=1)


def test_complete_synthetic_counts():
    ds, _ = generate_synthetic(SyntheticSpec(n_cases=524), seed=0)
    assert ds.n_cases == 524 and ds.n_controls == 2096
    assert len(ds.stratum_ids) == 524 and not ds.short_strata()


# ---- split -----------------------------------------------------------------------


def small_dataset(n_strata, controls=4):
    ds, _ = generate_synthetic(SyntheticSpec(n_cases=n_strata, controls_per_case=controls), seed=2)
    return ds


def test_split_counts_and_integrity():
    ds = small_dataset(10)
    tr, te = train_test_split(ds, 0.7, seed=1)
    assert len(tr.stratum_ids) == 7 and len(te.stratum_ids) == 3
    assert not set(tr.stratum_ids) & set(te.stratum_ids)
    assert tr.n_controls == 4 * tr.n_cases and te.n_controls == 4 * te.n_cases
    tr2, _ = train_test_split(ds, 0.7, seed=1)
    np.testing.assert_array_equal(tr.strata, tr2.strata)
    with pytest.raises(ValueError):
        train_test_split(small_dataset(1), 0.7)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 100))
def test_split_is_a_partition(n, frac, seed):
    strata = np.repeat(np.arange(n), 2)
    ds = CaseControlDataset(X=np.zeros((2 * n, 27)), labels=np.tile([1, 0], n), strata=strata,
                            window_end=np.zeros(2 * n, np.int64),
                            detectors=np.full((2 * n, 3), "x"))
    tr, te = train_test_split(ds, frac, seed)
    assert len(tr) + len(te) == len(ds)
    assert set(tr.stratum_ids) | set(te.stratum_ids) == set(range(n))
    assert not set(tr.stratum_ids) & set(te.stratum_ids)


# ---- CSV ---------------------------------------------------------------------------


HEADER = "detector_id,timestamp,lane,flow,speed,occupancy\n"


def test_empty_detector_csv():
    recs, errors = read_detector_csv(io.StringIO(HEADER))
    assert len(recs) == 0 and not errors


def test_bad_rows_reported_with_line_numbers():
    text = HEADER + ("C1,1551707400,1,3,60.5,12\n"
                     "C1,1551707420,1,3,60.5,105\n"
                     "C1,1551707441,1,3,60.5,12\n"
                     "C1,2019-03-04T13:50:40,2,-1,60,12\n"
                     "C1,2019-03-04T13:51:00Z,2,4,61,13\n")
    recs, errors = read_detector_csv(io.StringIO(text))
    assert [ln for ln, _ in errors.errors] == [3, 4, 5]
    assert "occupancy" in errors.errors[0][1]
    assert len(recs) == 2 and recs.timestamp[1] == 1551707460
    with pytest.raises(DataError, match="more than 1"):
        read_detector_csv(io.StringIO(text), max_errors=1)


def test_missing_column_is_fatal():
    with pytest.raises(DataError, match="occupancy"):
        read_detector_csv(io.StringIO("detector_id,timestamp,lane,flow,speed\n"))


def test_detector_round_trip():
    recs, _ = read_detector_csv(DATA / "golden_records.csv")
    back, errors = read_detector_csv(io.StringIO(detector_csv(recs)))
    assert not errors
    for f in ("detector_id", "timestamp", "lane", "flow", "speed", "occupancy"):
        np.testing.assert_array_equal(getattr(back, f), getattr(recs, f))


def test_case_control_round_trip():
    ds = small_dataset(6)
    text = case_control_csv(ds)
    assert text.splitlines()[0].split(",")[:3] == ["stratum_id", "label", "Mean_Flow_U"]
    back, errors = read_case_control_csv(io.StringIO(text))
    assert not errors
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.strata, ds.strata)
    np.testing.assert_array_equal(back.window_end, ds.window_end)
    np.testing.assert_array_equal(back.detectors, ds.detectors)
    assert case_control_csv(back) == text


def test_case_control_bad_label():
    ds = small_dataset(2)
    lines = case_control_csv(ds).splitlines()
    lines[2] = lines[2].replace(",0,", ",7,", 1)
    back, errors = read_case_control_csv(io.StringIO("\n".join(lines) + "\n"))
    assert [ln for ln, _ in errors.errors] == [3] and len(back) == len(ds) - 1


# ---- synthetic -------------------------------------------------------------------


def test_truncnorm_calibration():
    for mean, std, lo, hi in MEASURED_MARGINALS.values():
        loc, scale = calibrate_truncnorm(mean, std, lo, hi)
        a, b = (lo - loc) / scale, (hi - loc) / scale
        m, v = stats.truncnorm.stats(a, b, loc=loc, scale=scale, moments="mv")
        assert m == pytest.approx(mean, abs=1e-8) and np.sqrt(v) == pytest.approx(std, abs=1e-8)
    with pytest.raises(ValueError):
        calibrate_truncnorm(0.5, 5.0, 0.0, 1.0)  # wider than any law on [0, 1]


def test_synthetic_bounds_and_table_means():
    ds, truth = generate_synthetic(SyntheticSpec(n_cases=500), seed=4)
    controls = ds.X[ds.labels == 0]
    assert controls.shape[0] == 2000
    spec = truth.spec
    for j, name in enumerate(FEATURE_NAMES):
        mean, std, lo, hi = spec.marginals[name]
        assert ds.X[:, j].min() >= lo and ds.X[:, j].max() <= hi
        if name in MEASURED_MARGINALS:
            assert abs(controls[:, j].mean() - mean) <= 3 * std / np.sqrt(2000), name


def test_zero_effect_is_indistinguishable():
    ds, truth = generate_synthetic(SyntheticSpec(n_cases=500, effects={}), seed=7)
    assert truth.effects == {}
    for name in MEASURED_MARGINALS:
        j = FEATURE_NAMES.index(name)
        p = stats.ks_2samp(ds.X[ds.labels == 1, j], ds.X[ds.labels == 0, j]).pvalue
        assert p > 0.01, name


def test_default_effect_directions():
    ds, truth = generate_synthetic(seed=3)
    for name, shift in truth.effects.items():
        j = FEATURE_NAMES.index(name)
        diff = ds.X[ds.labels == 1, j].mean() - ds.X[ds.labels == 0, j].mean()
        assert np.sign(diff) == np.sign(shift)


def test_large_effect_gives_high_ivm_auc():
    spec = SyntheticSpec(n_cases=150, effects={"Mean_Speed_C": -2.0})
    ds, _ = generate_synthetic(spec, seed=8)
    tr, te = train_test_split(ds, 0.7, seed=8)
    cols = ["Mean_Speed_C"]
    mu, sd = tr.matrix(cols).mean(0), tr.matrix(cols).std(0)
    model = fit_ivm((tr.matrix(cols) - mu) / sd, tr.labels,
                    IvmConfig(kernel=KernelSpec.radial(0.5), lam=1.0))
    assert auc(model.decision_function((te.matrix(cols) - mu) / sd), te.labels) >= 0.9


def test_synthetic_determinism_and_spec_validation():
    a, _ = generate_synthetic(SyntheticSpec(n_cases=20), seed=1)
    b, _ = generate_synthetic(SyntheticSpec(n_cases=20), seed=1)
    np.testing.assert_array_equal(a.X, b.X)
    with pytest.raises(ValueError, match="unknown"):
        SyntheticSpec(effects={"Mean_Speed_X": 1.0})
    with pytest.raises(ValueError):
        SyntheticSpec.from_dict({"bogus": 1})
    spec = SyntheticSpec.from_dict({"n_cases": 3, "marginals": {"Mean_Flow_C": [5, 2, 0, 12]}})
    assert spec.marginals["Mean_Flow_C"] == (5, 2, 0, 12)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
