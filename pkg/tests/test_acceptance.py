"""Acceptance suite: one test per criterion, summarized at the end of the run."""
import csv
import math
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest

from ivmrisk.benchmarks import two_blobs
from ivmrisk.evaluation import auc
from ivmrisk.forest import ForestConfig, fit_forest, permutation_importance
from ivmrisk.ivm import EXACT, ONESTEP, IvmConfig, fit_ivm, greedy_step
from ivmrisk.kernels import KernelSpec, gram
from ivmrisk.klr import KlrProblem, fit_full_klr, fit_klr, gradient, newton_step, nll_objective
from ivmrisk.svm import SvmConfig, dual_objective, fit_svm, to_signed
from ivmrisk.traffic.aggregate import aggregate_window
from ivmrisk.traffic.csvio import read_detector_csv
from ivmrisk.traffic.pipeline import build_case_control, case_window_bounds
from ivmrisk.traffic.records import FEATURE_NAMES
from ivmrisk.traffic.simulate import MonthSpec, simulate_month
from ivmrisk.traffic.synthetic import SyntheticSpec, generate_synthetic
from oracles import auc_pairwise, fd_gradient, klr_gradient_descent, svm_dual_projected_gradient

DATA = Path(__file__).parent / "data"
criterion = pytest.mark.criterion


def labelled_cloud(seed, n, d=2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + 0.7 * rng.normal(size=n) > 0).astype(float)
    y[0], y[1] = 0.0, 1.0
    return X, y


def blob_benchmark():
    """400 training points, 1000 held-out points."""
    X, y = two_blobs(200, separation=2.0, seed=0)
    Xte, yte = two_blobs(500, separation=2.0, seed=1)
    return X, y, Xte, yte


@criterion(1, "KLR objective matches gradient-descent oracle; gradient matches finite differences")
def test_klr_oracle_equivalence():
    solver_seconds = 0.0
    for seed, family, n in [(0, "radial", 40), (1, "linear", 40), (2, "radial", 25),
                            (3, "linear", 30), (4, "radial", 35)]:
        X, y = labelled_cloud(seed, n)
        prob = KlrProblem.full(KernelSpec(family, 0.7), X, y, 0.5)
        t0 = time.perf_counter()
        sol = fit_klr(prob, tol=1e-12)
        a = np.random.default_rng(seed).normal(size=n) * 0.3
        g = gradient(prob, a)
        solver_seconds += time.perf_counter() - t0
        _, ref = klr_gradient_descent(prob.K_a, prob.K_q, y, 0.5)
        assert abs(sol.objective - ref) <= 1e-6 * abs(ref)
        g_fd = fd_gradient(lambda v: nll_objective(prob, v), a)
        assert np.linalg.norm(g - g_fd) <= 1e-5 * np.linalg.norm(g_fd)
    # the oracle is slow by design; the bound is on the solver
    assert solver_seconds < 10.0


@criterion(2, "single-point Newton step equals 0.5/(0.25+lambda)")
@pytest.mark.parametrize("lam", [0.25, 1.0])
def test_newton_step_hand_case(lam):
    a = newton_step(KlrProblem([[1.0]], [[1.0]], [1], lam), [0.0])
    assert abs(a[0] - 0.5 / (0.25 + lam)) <= 1e-12


@criterion(3, "IVM with every point imported reproduces full-basis KLR")
def test_ivm_full_basis_equals_klr():
    t0 = time.perf_counter()
    for seed, family, n in [(0, "radial", 30), (1, "radial", 20), (2, "linear", 25)]:
        X, y = labelled_cloud(seed, n)
        kernel = KernelSpec(family, 0.5)
        model = fit_ivm(X, y, IvmConfig(kernel=kernel, lam=0.2, conv_tol=0.0, max_import=n,
                                        selection_mode=EXACT))
        ref_model, ref = fit_full_klr(X, y, kernel, 0.2)
        assert abs(model.objective - ref.objective) <= 1e-8
        grid = np.random.default_rng(seed).normal(size=(100, 2))
        np.testing.assert_allclose(model.predict_proba(grid), ref_model.predict_proba(grid),
                                   rtol=0, atol=1e-6)
    assert time.perf_counter() - t0 < 30.0


@criterion(4, "first greedy import point equals the exhaustive singleton argmin")
def test_first_greedy_choice():
    cfg = IvmConfig(kernel=KernelSpec.radial(0.5), lam=0.1, selection_mode=EXACT)
    for seed in range(10):
        X, y = labelled_cloud(1000 + seed, 12)
        K = gram(cfg.kernel, X)
        scores = [fit_klr(KlrProblem(K[:, [c]], K[np.ix_([c], [c])], y, cfg.lam),
                          tol=1e-12).objective for c in range(12)]
        chosen, _, _ = greedy_step(X, y, [], range(12), cfg)
        assert chosen == int(np.argmin(scores)), seed


@criterion(5, "SMO solution satisfies KKT and matches a projected-gradient QP oracle")
def test_svm_kkt_and_qp_oracle():
    C = 1.0
    for seed in range(5):
        X, y = two_blobs(30, separation=1.5, seed=50 + seed)
        cfg = SvmConfig(KernelSpec.radial(0.5), C)
        model = fit_svm(X, y, cfg)
        assert model.converged
        ys = to_signed(y)
        alpha = np.zeros(60)
        alpha[model.support_indices] = model.alphas
        margin = ys * model.decision_function(X)
        viol = np.where(alpha == 0, 1 - margin,
                        np.where(alpha == C, margin - 1, np.abs(margin - 1)))
        assert viol.max() <= 1e-3
        assert abs(alpha @ ys) <= 1e-8
        K = gram(cfg.kernel, X)
        _, ref = svm_dual_projected_gradient(K, ys, C)
        assert abs(dual_objective(alpha, K, ys) - ref) <= 1e-4 * abs(ref)


@criterion(6, "IVM is sparser than the RBF SVM at comparable test AUC")
def test_sparsity_against_svm():
    X, y, Xte, yte = blob_benchmark()
    kernel = KernelSpec.radial(0.5)
    t0 = time.perf_counter()
    ivm = fit_ivm(X, y, IvmConfig(kernel=kernel, lam=1.0, selection_mode=ONESTEP))
    elapsed = time.perf_counter() - t0
    svm = fit_svm(X, y, SvmConfig(kernel, 1.0))
    print(f"import vectors {ivm.n_import}, support vectors {svm.n_support}")
    assert ivm.n_import <= 0.2 * svm.n_support
    assert auc(ivm.decision_function(Xte), yte) >= auc(svm.decision_function(Xte), yte) - 0.05
    assert elapsed < 120.0


@criterion(7, "trapezoidal AUC equals the pairwise Mann-Whitney count")
def test_auc_exact():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(-5, 6, n).astype(float)  # many ties
        assert auc(scores, labels) == auc_pairwise(scores, labels)


@criterion(8, "forest ranks a planted feature first; constant feature has zero importance")
def test_forest_importance_signal():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        y = rng.permutation(np.repeat([0.0, 1.0], 100))
        X = rng.normal(size=(200, 10))
        X[:, 0] += y  # one standard deviation shift
        f = fit_forest(X, y, ForestConfig(ntree=400, mtry=2, seed=seed))
        hits += permutation_importance(f, X, y, seed=seed).ranking()[0] == 0
    print(f"planted feature ranked first in {hits}/100 seeds")
    assert hits >= 95

    X[:, 5] = 3.0
    f = fit_forest(X, y, ForestConfig(ntree=400, mtry=2, seed=1))
    vi = permutation_importance(f, X, y, seed=1)
    assert vi.raw[5] == 0.0


def _utc(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp())


@criterion(9, "pipeline golden cases")
def test_pipeline_golden():
    assert case_window_bounds(_utc(2019, 3, 4, 14, 0)) == (_utc(2019, 3, 4, 13, 50),
                                                           _utc(2019, 3, 4, 13, 55))
    assert case_window_bounds(_utc(2019, 3, 4, 15, 25)) == (_utc(2019, 3, 4, 15, 15),
                                                            _utc(2019, 3, 4, 15, 20))

    recs, errors = read_detector_csv(DATA / "golden_records.csv")
    assert not errors
    expected = {r["feature"]: float(r["value"]) for r in csv.DictReader(open(DATA / "golden_features.csv"))}
    got = aggregate_window(recs, ("U7", "C7", "D7"), 1551707700).as_dict()
    assert list(expected) == list(FEATURE_NAMES)
    assert max(abs(got[k] - expected[k]) for k in FEATURE_NAMES) <= 1e-9

    ds, _ = generate_synthetic(SyntheticSpec(n_cases=524), seed=0)
    assert ds.n_cases == 524 and ds.n_controls == 2096 and not ds.short_strata()

    base = MonthSpec(n_locations=1, n_days=5, crashes_per_location=1)
    _, crashes = simulate_month(base, seed=1)
    crash_day = crashes[0].time // 86400 - base.first_day
    others = [d for d in range(5) if d != crash_day]
    gappy = MonthSpec(n_locations=1, n_days=5, crashes_per_location=1,
                      missing=tuple(("C000", d) for d in others[1:]))
    recs, _ = simulate_month(gappy, seed=1)
    short, report = build_case_control(recs, crashes, seed=1)
    assert report.short_strata == [(0, 1)] and short.short_strata() == [0]


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file() and p.name != "timings.json"}


@criterion(10, "reproduction run: time, AUC range, ROC plot, byte identity")
def test_reproduce(reproduce_runs):
    (a, b), seconds = reproduce_runs
    print("reproduce seconds:", [round(s, 1) for s in seconds])
    assert max(seconds) < 300.0
    rows = list(csv.DictReader(open(a / "evaluation" / "performance.csv")))
    aucs = {r["model"]: float(r["test_auc"]) for r in rows}
    print("test AUC:", aucs)
    assert set(aucs) == {"IVM", "SVM radial", "SVM linear"}
    assert all(0.7 <= v <= 1.0 for v in aucs.values())
    assert (a / "evaluation" / "roc.svg").stat().st_size > 0
    assert _files(a) == _files(b)


@criterion(11, "IVM objective trace is non-increasing and flattens by step 10")
def test_objective_trace_shape():
    X, y, _, _ = blob_benchmark()
    model = fit_ivm(X, y, IvmConfig(kernel=KernelSpec.radial(0.5), lam=1.0, conv_tol=0.0,
                                    max_import=12, selection_mode=EXACT))
    H = np.r_[len(y) * math.log(2), model.history]
    dH = np.diff(H)
    assert np.all(dH <= 0)
    assert abs(dH[9]) <= 0.1 * abs(dH[0])
