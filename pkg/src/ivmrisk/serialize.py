"""Versioned plain-text model files.

Layout (one item per line, floats in shortest round-trip form)::

    ivmrisk-model 1
    kind ivm|svm
    kernel radial|linear
    gamma <float>
    lambda <float>          (ivm)   |   cost <float> and bias <float>   (svm)
    features <name> ...     (optional)
    scaler_mean <d floats>  (optional, with scaler_scale)
    scaler_scale <d floats>
    history <floats>        (ivm, optional)
    points <n> <d>
    <n rows of d floats>
    coef
    <n floats>

Optional input standardization is stored with the model so scoring raw
features needs nothing else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text, fmt
from .ivm import IvmModel
from .kernels import KernelSpec
from .svm import SvmModel

MAGIC = "ivmrisk-model"
VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(mean=X.mean(axis=0), scale=np.where(sd > 0, sd, 1.0))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass(frozen=True)
class SavedModel:
    model: IvmModel | SvmModel
    features: tuple = ()
    scaler: Standardizer | None = None

    @property
    def kind(self) -> str:
        return "ivm" if isinstance(self.model, IvmModel) else "svm"

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.scaler is not None:
            X = self.scaler.transform(X)
        return self.model.decision_function(X)


def _floats(xs):
    return " ".join(fmt(x) for x in np.ravel(xs))


def dumps(saved: SavedModel) -> str:
    m = saved.model
    lines = [f"{MAGIC} {VERSION}", f"kind {saved.kind}", f"kernel {m.kernel.family}",
             f"gamma {fmt(m.kernel.gamma)}"]
    if isinstance(m, IvmModel):
        lines.append(f"lambda {fmt(m.lam)}")
        pts, coef = m.import_points, m.a
    else:
        lines += [f"cost {fmt(m.cost if m.cost is not None else float('nan'))}",
                  f"bias {fmt(m.bias)}"]
        pts, coef = m.support_vectors, m.dual_coeffs
    if saved.features:
        if any(not f or any(c.isspace() for c in f) for f in saved.features):
            raise ModelFormatError("feature names must be non-empty and contain no whitespace")
        lines.append("features " + " ".join(saved.features))
    if saved.scaler is not None:
        lines.append("scaler_mean " + _floats(saved.scaler.mean))
        lines.append("scaler_scale " + _floats(saved.scaler.scale))
    if isinstance(m, IvmModel):
        lines.append("history " + _floats(m.history))
    lines.append(f"points {pts.shape[0]} {pts.shape[1]}")
    lines += [_floats(row) for row in pts]
    lines.append("coef")
    lines += [fmt(c) for c in coef]
    return "\n".join(lines) + "\n"


def loads(text: str) -> SavedModel:
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise ModelFormatError(f"not an {MAGIC} version {VERSION} file")
    head = {}
    k = 1
    while k < len(lines) and not lines[k].startswith("points "):
        key, _, rest = lines[k].partition(" ")
        head[key] = rest
        k += 1
    if k == len(lines):
        raise ModelFormatError("missing 'points' section")
    try:
        n, d = (int(v) for v in lines[k].split()[1:3])
        pts = np.array([[float(v) for v in lines[k + 1 + i].split()] for i in range(n)]).reshape(n, d)
        if lines[k + 1 + n] != "coef":
            raise ModelFormatError("missing 'coef' section")
        coef = np.array([float(v) for v in lines[k + 2 + n:k + 2 + 2 * n]])
        if coef.size != n:
            raise ModelFormatError(f"expected {n} coefficients, got {coef.size}")
        kernel = KernelSpec(family=head["kernel"], gamma=float(head["gamma"]))
        kind = head["kind"]
        if kind == "ivm":
            hist = (np.array([float(v) for v in head["history"].split()]) if "history" in head
                    else np.full(n, np.nan))
            model = IvmModel(import_points=pts, a=coef, kernel=kernel, lam=float(head["lambda"]),
                             history=hist)
        elif kind == "svm":
            model = SvmModel(support_vectors=pts, dual_coeffs=coef, bias=float(head["bias"]),
                             kernel=kernel, cost=float(head["cost"]))
        else:
            raise ModelFormatError(f"unknown model kind {kind!r}")
        scaler = None
        if "scaler_mean" in head:
            scaler = Standardizer(mean=np.array([float(v) for v in head["scaler_mean"].split()]),
                                  scale=np.array([float(v) for v in head["scaler_scale"].split()]))
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    features = tuple(head.get("features", "").split())
    return SavedModel(model=model, features=features, scaler=scaler)


def save_model(saved: SavedModel, path):
    return atomic_write_text(path, dumps(saved))


def load_model(path) -> SavedModel:
    with open(path) as fh:
        return loads(fh.read())
