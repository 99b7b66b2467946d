"""Experiment manifest and the simulate / select / train / evaluate stages.

Every stage reads the manifest, writes its outputs under ``out`` and is
deterministic given (manifest, seed).  Wall-clock training times go to a
separate ``timings.json`` so that all other outputs are reproducible byte
for byte.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, fmt
from .evaluation import DEFAULT_FPR_TARGETS, auc, emit_roc_plot, performance_rows, report_csv
from .forest import (ForestConfig, feature_correlations, fit_forest, oob_error,
                     permutation_importance, select_features)
from .ivm import IvmConfig, IvmError, fit_ivm
from .kernels import KernelSpec
from .klr import SolverError
from .serialize import SavedModel, Standardizer, load_model, save_model
from .svm import SvmConfig, fit_svm, grid_search, stratified_folds
from .traffic.csvio import read_case_control_csv, write_case_control_csv
from .traffic.pipeline import train_test_split
from .traffic.records import FEATURE_NAMES, DataError
from .traffic.synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": "results",
    "data": {"source": "synthetic", "path": None, "synthetic": {}, "exclude_cv_flagged": True,
             "max_row_errors": 0},
    "split": {"train_fraction": 0.7},
    "selection": {"ntree": 400, "mtry": 2, "min_node": 1, "k": 4, "corr_threshold": 0.7,
                  "features": None},
    "ivm": {"kernel": "radial", "sigmas": [1.0, 2.0], "gammas": None, "lambdas": [1.0, 10.0],
            "folds": 3, "conv_tol": 1e-4, "conv_lag": 1, "max_import": None, "mode": None},
    "svm": {"kernels": ["radial", "linear"], "gammas": [0.01, 0.1, 0.5, 1.0],
            "costs": [0.1, 1.0, 10.0], "folds": 5, "smo_tol": 1e-3},
    "evaluation": {"fpr_targets": list(DEFAULT_FPR_TARGETS)},
}

# stage streams spawned off the top-level seed
_STREAM = {"data": 0, "split": 1, "forest": 2, "importance": 3, "svm_cv": 4, "ivm_cv": 5}

MODEL_FILES = {"ivm": "ivm.model", "svm_radial": "svm_radial.model",
               "svm_linear": "svm_linear.model"}
DISPLAY = {"ivm": "IVM", "svm_radial": "SVM radial", "svm_linear": "SVM linear"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key != "synthetic":
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key} must be a mapping")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    try:
        validate_config(cfg)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    return cfg


def validate_config(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2 ** 64, "seed must be a u64 integer")
    src = cfg["data"]["source"]
    need(src in ("synthetic", "csv"), "data.source must be 'synthetic' or 'csv'")
    if src == "csv":
        need(cfg["data"]["path"], "data.path is required for a csv source")
        need(Path(cfg["data"]["path"]).exists(), f"data.path {cfg['data']['path']} does not exist")
    else:
        synthetic_spec(cfg)
    need(0 < cfg["split"]["train_fraction"] < 1, "split.train_fraction must lie in (0, 1)")
    sel = cfg["selection"]
    need(sel["ntree"] >= 1 and sel["mtry"] >= 1 and sel["k"] >= 1, "selection counts must be >= 1")
    if sel["features"] is not None:
        unknown = set(sel["features"]) - set(FEATURE_NAMES)
        need(not unknown, f"selection.features has unknown names {sorted(unknown)}")
    ivm, svm = cfg["ivm"], cfg["svm"]
    need(ivm["kernel"] in ("radial", "linear"), "ivm.kernel must be radial or linear")
    widths = ivm["gammas"] if ivm["gammas"] is not None else ivm["sigmas"]
    need(widths and ivm["lambdas"], "ivm grids must be non-empty")
    need(all(s > 0 for s in widths) and all(v > 0 for v in ivm["lambdas"]),
         "ivm grid values must be positive")
    need(ivm["mode"] in (None, "exact", "onestep"), "ivm.mode must be exact or onestep")
    need(svm["kernels"] and svm["gammas"] and svm["costs"], "svm grids must be non-empty")
    need(set(svm["kernels"]) <= {"radial", "linear"}, "svm.kernels must be radial and/or linear")
    need(all(0 <= t <= 1 for t in cfg["evaluation"]["fpr_targets"]), "fpr targets must lie in [0, 1]")


def synthetic_spec(cfg) -> SyntheticSpec:
    """``data.synthetic`` is a mapping of overrides or the path of a JSON spec file."""
    raw = cfg["data"]["synthetic"]
    if isinstance(raw, str):
        try:
            with open(raw) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load synthetic spec {cfg['data']['synthetic']}: {exc}") from exc
    try:
        return SyntheticSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.synthetic: {exc}") from exc


def stage_seed(cfg, stage: str) -> int:
    ss = np.random.SeedSequence(cfg["seed"], spawn_key=(_STREAM[stage],))
    return int(ss.generate_state(1, np.uint64)[0])


def _out(cfg, *parts) -> Path:
    return Path(cfg["out"]).joinpath(*parts)


def _write_json(path, obj):
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# ---- data ----------------------------------------------------------------------


def cmd_simulate(cfg) -> dict:
    spec = synthetic_spec(cfg)
    ds, truth = generate_synthetic(spec, seed=stage_seed(cfg, "data"))
    paths = {"dataset": write_case_control_csv(ds, _out(cfg, "data", "case_control.csv")),
             "ground_truth": atomic_write_text(_out(cfg, "data", "ground_truth.json"),
                                               truth.to_json())}
    log.info("wrote %d strata (%d rows)", len(ds.stratum_ids), len(ds))
    return paths


def load_dataset(cfg):
    if cfg["data"]["source"] == "csv":
        path = Path(cfg["data"]["path"])
    else:
        path = _out(cfg, "data", "case_control.csv")
        if not path.exists():
            raise DataError(f"{path} not found; run 'simulate' first")
    ds, errors = read_case_control_csv(path, max_errors=cfg["data"]["max_row_errors"])
    if errors:
        log.warning("skipped %d invalid rows:\n%s", len(errors), errors.format())
    if len(ds) == 0:
        raise DataError(f"{path} holds no observations")
    if cfg["data"]["exclude_cv_flagged"]:
        flagged = ds.cv_flagged()
        if flagged.any():
            log.info("excluding %d rows with a zero mean (CV undefined)", int(flagged.sum()))
            ds = ds.subset(~flagged)
    return ds


def load_split(cfg):
    ds = load_dataset(cfg)
    try:
        return train_test_split(ds, cfg["split"]["train_fraction"], seed=stage_seed(cfg, "split"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _check_classes(ds, what):
    if ds.n_cases == 0 or ds.n_controls == 0:
        raise DataError(f"{what} split needs both cases and controls")


# ---- feature selection ----------------------------------------------------------


def importance_csv(names, imp) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "mean_decrease_accuracy", "percent"])
    for j in imp.ranking():
        w.writerow([names[j], fmt(imp.raw[j]), fmt(imp.percent[j])])
    return buf.getvalue()


def cmd_select(cfg) -> dict:
    train, _ = load_split(cfg)
    _check_classes(train, "training")
    sel = cfg["selection"]
    X, y = train.X, train.labels
    if sel["mtry"] > X.shape[1]:
        raise ConfigError(f"selection.mtry={sel['mtry']} exceeds {X.shape[1]} features")
    if sel["k"] > X.shape[1]:
        raise ConfigError(f"selection.k={sel['k']} exceeds {X.shape[1]} features")
    forest = fit_forest(X, y, ForestConfig(ntree=sel["ntree"], mtry=sel["mtry"],
                                           min_node=sel["min_node"], seed=stage_seed(cfg, "forest")))
    imp = permutation_importance(forest, X, y, seed=stage_seed(cfg, "importance"),
                                 names=train.feature_names)
    oob = oob_error(forest, X, y)
    choice = select_features(imp, feature_correlations(X), sel["k"], sel["corr_threshold"],
                             names=train.feature_names)
    features = list(sel["features"]) if sel["features"] else choice.names
    summary = {"features": features, "ranked_selection": choice.names, "short": choice.short,
               "oob_error": oob.error, "empty_oob_trees": oob.n_empty_trees,
               "corr_threshold": sel["corr_threshold"], "k": sel["k"]}
    return {"importance": atomic_write_text(_out(cfg, "selection", "importance.csv"),
                                            importance_csv(train.feature_names, imp)),
            "selected": _write_json(_out(cfg, "selection", "selected.json"), summary)}


def selected_features(cfg):
    if cfg["selection"]["features"]:
        return list(cfg["selection"]["features"])
    path = _out(cfg, "selection", "selected.json")
    if not path.exists():
        raise DataError(f"{path} not found; run 'select' first or set selection.features")
    return _read_json(path)["features"]


# ---- training ----------------------------------------------------------------------


def ivm_kernels(cfg):
    """Kernel grid: ``gammas`` when given, otherwise widths ``sigmas`` (gamma = 1 / (2 sigma^2))."""
    ic = cfg["ivm"]
    if ic["kernel"] == "linear":
        return [KernelSpec.linear()]
    if ic["gammas"] is not None:
        return [KernelSpec.radial(float(g)) for g in ic["gammas"]]
    return [KernelSpec.from_sigma(float(s)) for s in ic["sigmas"]]


def _ivm_config(cfg, kernel, lam, mode):
    ic = cfg["ivm"]
    return IvmConfig(kernel=kernel, lam=float(lam), conv_tol=ic["conv_tol"],
                     conv_lag=ic["conv_lag"], max_import=ic["max_import"],
                     selection_mode=mode or ic["mode"])


def ivm_grid(cfg, X, y, mode=None):
    """Cross-validated AUC for each (kernel, lambda); rows in grid order."""
    folds = cfg["ivm"]["folds"]
    fold = stratified_folds(y, folds, seed=stage_seed(cfg, "ivm_cv"))
    rows = []
    for kernel in ivm_kernels(cfg):
        for lam in cfg["ivm"]["lambdas"]:
            conf = _ivm_config(cfg, kernel, lam, mode)
            scores = np.empty(y.size)
            sizes = []
            for f in range(folds):
                tr, te = fold != f, fold == f
                m = fit_ivm(X[tr], y[tr], conf)
                scores[te] = m.decision_function(X[te])
                sizes.append(m.n_import)
            # pooled out-of-fold AUC
            rows.append({"kernel": kernel.family, "gamma": kernel.gamma, "lambda": float(lam),
                         "cv_auc": auc(scores, y), "mean_import": float(np.mean(sizes))})
    best = max(rows, key=lambda r: r["cv_auc"])
    return rows, best


def _table_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def cmd_train(cfg, model="both", mode=None) -> dict:
    if model not in ("ivm", "svm", "both"):
        raise ConfigError(f"model must be ivm, svm or both, got {model!r}")
    features = selected_features(cfg)
    train, _ = load_split(cfg)
    _check_classes(train, "training")
    scaler = Standardizer.fit(train.matrix(features))
    X, y = scaler.transform(train.matrix(features)), train.labels
    report, timings, paths = {"features": features, "n_train": int(y.size)}, {}, {}
    mdir = _out(cfg, "models")
    try:
        if model in ("ivm", "both"):
            rows, best = ivm_grid(cfg, X, y, mode)
            paths["ivm_grid"] = atomic_write_text(
                mdir / "ivm_grid.csv",
                _table_csv(rows, ["kernel", "gamma", "lambda", "cv_auc", "mean_import"]))
            t0 = time.perf_counter()
            kernel = KernelSpec(best["kernel"], best["gamma"])
            m = fit_ivm(X, y, _ivm_config(cfg, kernel, best["lambda"], mode))
            timings["ivm"] = time.perf_counter() - t0
            paths["ivm"] = save_model(SavedModel(m, tuple(features), scaler), mdir / MODEL_FILES["ivm"])
            report["ivm"] = {"kernel": kernel.family, "gamma": kernel.gamma, "lambda": m.lam,
                             "n_import": m.n_import, "cv_auc": best["cv_auc"],
                             "final_objective": m.objective, "converged": m.converged,
                             "history": m.history.tolist()}
        if model in ("svm", "both"):
            sc = cfg["svm"]
            gs = grid_search(X, y, kernels=tuple(sc["kernels"]), gammas=tuple(sc["gammas"]),
                             costs=tuple(sc["costs"]), folds=sc["folds"],
                             seed=stage_seed(cfg, "svm_cv"), smo_tol=sc["smo_tol"])
            paths["svm_grid"] = atomic_write_text(
                mdir / "svm_grid.csv",
                _table_csv(gs.table, ["kernel", "gamma", "cost", "cv_error", "mean_support"]))
            for family in sc["kernels"]:
                row = gs.best_for(family)
                conf = SvmConfig(KernelSpec(family, row["gamma"]), row["cost"], sc["smo_tol"])
                t0 = time.perf_counter()
                m = fit_svm(X, y, conf)
                key = f"svm_{family}"
                timings[key] = time.perf_counter() - t0
                if not m.converged:
                    raise ConvergenceError(f"SMO did not converge for the best {family} SVM")
                paths[key] = save_model(SavedModel(m, tuple(features), scaler),
                                        mdir / MODEL_FILES[key])
                report[key] = {"gamma": row["gamma"] if family == "radial" else None,
                               "cost": row["cost"], "cv_error": row["cv_error"],
                               "n_support": m.n_support}
    except (SolverError, IvmError) as exc:
        raise ConvergenceError(str(exc)) from exc
    paths["report"] = _write_json(mdir / "training_report.json", report)
    paths["timings"] = _write_json(_out(cfg, "timings.json"),
                                   {k: round(v, 6) for k, v in timings.items()})
    return paths


# ---- evaluation ------------------------------------------------------------------


def cmd_evaluate(cfg, model="both") -> dict:
    keys = {"ivm": ["ivm"], "svm": ["svm_radial", "svm_linear"],
            "both": ["ivm", "svm_radial", "svm_linear"]}[model]
    mdir = _out(cfg, "models")
    models = {k: load_model(mdir / MODEL_FILES[k]) for k in keys if (mdir / MODEL_FILES[k]).exists()}
    if not models:
        raise DataError(f"no trained models in {mdir}; run 'train' first")
    train, test = load_split(cfg)
    _check_classes(test, "test")
    rows, curves = [], {}
    targets = cfg["evaluation"]["fpr_targets"]
    for key, saved in models.items():
        feats = list(saved.features)
        r, _, test_curve = performance_rows(
            DISPLAY[key], saved.decision_function(train.matrix(feats)), train.labels,
            saved.decision_function(test.matrix(feats)), test.labels, targets)
        rows += r
        curves[DISPLAY[key]] = test_curve
    edir = _out(cfg, "evaluation")
    csv_path, svg_path = emit_roc_plot(curves, edir / "roc")
    return {"performance": atomic_write_text(edir / "performance.csv", report_csv(rows)),
            "roc_csv": csv_path, "roc_svg": svg_path}


def cmd_reproduce(cfg, model="both", mode=None) -> dict:
    paths = {}
    if cfg["data"]["source"] == "synthetic":
        paths.update(cmd_simulate(cfg))
    if not cfg["selection"]["features"]:
        paths.update(cmd_select(cfg))
    paths.update(cmd_train(cfg, model, mode))
    paths.update(cmd_evaluate(cfg, model))
    return paths
