"""Linear soft-margin SVM trained with SMO, plus temporal k-fold selection.

The solver works on the dual with a precomputed linear Gram matrix and the
second-order working-set selection used by LIBSVM, so the bias stays
unregularised and the primal objective is the textbook

    0.5 * ||w||^2 + C * sum_i max(0, 1 - y_i (w . x_i + b))
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

LEGITIMATE = "legitimate"
ILLEGITIMATE = "illegitimate"
LABELS = (LEGITIMATE, ILLEGITIMATE)

MODEL_FORMAT = 1


class EmptyTrainingSet(ValueError):
    pass


class SingleClassTraining(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class WindowVector:
    values: np.ndarray
    layout: tuple[tuple[str, str], ...]
    window_id: int = 0
    label: str | None = None
    version: int = 0
    timestamp: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.layout),):
            raise ValueError(
                f"vector of length {self.values.shape} does not match layout of {len(self.layout)}"
            )


def to_sign(label: str) -> float:
    if label == LEGITIMATE:
        return 1.0
    if label == ILLEGITIMATE:
        return -1.0
    raise ValueError(f"unknown label {label!r}")


def _matrix(windows: Sequence[WindowVector]) -> np.ndarray:
    return np.vstack([w.values for w in windows])


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def fit_scaler_matrix(x: np.ndarray) -> Scaler:
    if x.shape[0] == 0:
        raise EmptyTrainingSet("cannot fit a scaler on zero samples")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # constant sensors would otherwise divide by zero
    std = np.where(std > 1e-12, std, 1.0)
    return Scaler(mean, std)


def fit_scaler(training: Sequence[WindowVector]) -> Scaler:
    if not training:
        raise EmptyTrainingSet("cannot fit a scaler on zero samples")
    return fit_scaler_matrix(_matrix(training))


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    c: float
    scaler: Scaler
    feature_set_version: int
    layout: tuple[tuple[str, str], ...] = ()
    delta_threshold: float | None = None

    def decision(self, x: np.ndarray) -> np.ndarray:
        """Raw scores for an (n, d) matrix of unscaled vectors."""
        return self.scaler.transform(x) @ self.w + self.b

    def to_document(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "layout": [list(p) for p in self.layout],
            "w": [float(v) for v in self.w],
            "b": float(self.b),
            "c": float(self.c),
            "scaler_mean": [float(v) for v in self.scaler.mean],
            "scaler_std": [float(v) for v in self.scaler.std],
            "feature_set_version": self.feature_set_version,
            "delta_threshold": self.delta_threshold,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True)

    @classmethod
    def from_document(cls, doc: dict) -> "SvmModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {doc.get('format')!r}")
        return cls(
            w=np.asarray(doc["w"], dtype=float),
            b=float(doc["b"]),
            c=float(doc["c"]),
            scaler=Scaler(np.asarray(doc["scaler_mean"], float), np.asarray(doc["scaler_std"], float)),
            feature_set_version=int(doc["feature_set_version"]),
            layout=tuple(tuple(p) for p in doc["layout"]),
            delta_threshold=doc.get("delta_threshold"),
        )

    @classmethod
    def loads(cls, text: str) -> "SvmModel":
        return cls.from_document(json.loads(text))


# -- primal objective ---------------------------------------------------------


def hinge_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, c: float) -> float:
    margins = 1.0 - y * (x @ w + b)
    return 0.5 * float(w @ w) + c * float(np.maximum(margins, 0.0).sum())


def hinge_subgradient(
    w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, c: float
) -> tuple[np.ndarray, float]:
    """A subgradient of :func:`hinge_objective`; the gradient away from kinks."""
    active = (1.0 - y * (x @ w + b)) > 0
    gw = w - c * (y[active, None] * x[active]).sum(axis=0)
    gb = -c * float(y[active].sum())
    return gw, gb


# -- SMO ----------------------------------------------------------------------

_TAU = 1e-12


@njit(cache=True)
def _smo_kernel(k, y, c, tol, max_iter):  # pragma: no cover - compiled
    n = k.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)
    for _ in range(max_iter):
        g_max = -np.inf
        g_min = np.inf
        i = -1
        for t in range(n):
            s = -y[t] * grad[t]
            if (y[t] > 0 and alpha[t] < c) or (y[t] < 0 and alpha[t] > 0):
                if s >= g_max:
                    if s > g_max or i < 0:
                        g_max = s
                        i = t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < c):
                if s < g_min:
                    g_min = s
        if i < 0 or g_max - g_min < tol:
            break
        # second-order choice of j among violating low-set indices
        j = -1
        best = np.inf
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < c):
                b_it = g_max + y[t] * grad[t]
                if b_it > 0:
                    a_it = k[i, i] + k[t, t] - 2.0 * k[i, t]
                    if a_it <= 0:
                        a_it = _TAU
                    gain = -(b_it * b_it) / a_it
                    if gain < best:
                        best = gain
                        j = t
        if j < 0:
            break

        ai_old = alpha[i]
        aj_old = alpha[j]
        q_ij = y[i] * y[j] * k[i, j]
        if y[i] != y[j]:
            quad = k[i, i] + k[j, j] + 2.0 * q_ij
            if quad <= 0:
                quad = _TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai = ai_old + delta
            aj = aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj = 0.0
                    ai = diff
            elif ai < 0:
                ai = 0.0
                aj = -diff
            if diff > 0:
                if ai > c:
                    ai = c
                    aj = c - diff
            elif aj > c:
                aj = c
                ai = c + diff
        else:
            quad = k[i, i] + k[j, j] - 2.0 * q_ij
            if quad <= 0:
                quad = _TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai = ai_old - delta
            aj = aj_old + delta
            if total > c:
                if ai > c:
                    ai = c
                    aj = total - c
            elif aj < 0:
                aj = 0.0
                ai = total
            if total > c:
                if aj > c:
                    aj = c
                    ai = total - c
            elif ai < 0:
                ai = 0.0
                aj = total
        alpha[i] = ai
        alpha[j] = aj
        dai = (ai - ai_old) * y[i]
        daj = (aj - aj_old) * y[j]
        for t in range(n):
            grad[t] += y[t] * (k[i, t] * dai + k[j, t] * daj)
    return alpha, grad


def smo(
    x: np.ndarray, y: np.ndarray, c: float, tol: float = 1e-4, max_iter: int | None = None
) -> tuple[np.ndarray, float, np.ndarray]:
    """Solve the linear soft-margin dual. Returns ``(w, b, alpha)``.

    ``tol`` bounds the maximal KKT violation at exit.
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if max_iter is None:
        max_iter = max(1_000_000, 1000 * x.shape[0])
    alpha, grad = _smo_kernel(x @ x.T, y, float(c), float(tol), int(max_iter))
    w = (alpha * y) @ x
    b = -_rho(alpha, grad, y, c)
    return w, b, alpha


def _rho(alpha: np.ndarray, grad: np.ndarray, y: np.ndarray, c: float) -> float:
    yg = y * grad
    at_upper = alpha >= c
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        return float(yg[free].mean())
    pos = y > 0
    ub_mask = (at_upper & ~pos) | (at_lower & pos)
    lb_mask = (at_upper & pos) | (at_lower & ~pos)
    ub = float(yg[ub_mask].min()) if ub_mask.any() else math.inf
    lb = float(yg[lb_mask].max()) if lb_mask.any() else -math.inf
    if math.isinf(ub) or math.isinf(lb):
        return ub if not math.isinf(ub) else lb
    return (ub + lb) / 2.0


def train_matrix(x: np.ndarray, y: np.ndarray, c: float, version: int = 0, layout=()) -> SvmModel:
    if x.shape[0] == 0:
        raise EmptyTrainingSet("no training windows")
    if not c > 0:
        raise ValueError("C must be positive")
    if not ((y > 0).any() and (y < 0).any()):
        raise SingleClassTraining("training data needs both legitimate and illegitimate windows")
    scaler = fit_scaler_matrix(x)
    w, b, _ = smo(scaler.transform(x), y, c)
    return SvmModel(w=w, b=b, c=c, scaler=scaler, feature_set_version=version, layout=tuple(layout))


def train_svm(training: Sequence[WindowVector], c: float) -> SvmModel:
    if not training:
        raise EmptyTrainingSet("no training windows")
    layout = training[0].layout
    version = training[0].version
    for v in training:
        if v.layout != layout or v.version != version:
            raise LayoutMismatch("training windows mix layouts")
        if v.label is None:
            raise ValueError(f"window {v.window_id} is unlabeled")
    y = np.array([to_sign(v.label) for v in training])
    return train_matrix(_matrix(training), y, c, version=version, layout=layout)


def predict(model: SvmModel, v: WindowVector) -> tuple[float, str]:
    if v.version != model.feature_set_version or (model.layout and v.layout != model.layout):
        raise LayoutMismatch(
            f"window layout v{v.version} does not match model v{model.feature_set_version}"
        )
    score = float(model.scaler.transform(v.values) @ model.w + model.b)
    return score, LEGITIMATE if score >= 0 else ILLEGITIMATE


# -- cross-validation ---------------------------------------------------------


@dataclass
class CvReport:
    grid: list[tuple[float, float]]
    fold_accuracies: list[list[float]]
    selected: tuple[float, float]
    mean_accuracies: list[float] = field(default_factory=list)


# scorer(train_windows, test_windows, model, c, delta) -> accuracy on test_windows
FoldScorer = Callable[[Sequence[WindowVector], Sequence[WindowVector], SvmModel, float, float], float]


def temporal_folds(n: int, folds: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` blocks covering ``range(n)`` in time order."""
    return [(i * n // folds, (i + 1) * n // folds) for i in range(folds)]


def _plain_accuracy(train, test, model, c, delta) -> float:
    hits = sum(predict(model, v)[1] == v.label for v in test)
    return hits / len(test)


def cross_validate(
    data: Sequence[WindowVector],
    folds: int,
    grid: Sequence[tuple[float, float]],
    scorer: FoldScorer | None = None,
) -> CvReport:
    """Grid-search (C, delta) over contiguous temporal folds.

    Folds whose training part holds a single class cannot be fitted and are
    left out of the mean (recorded as NaN). The selected pair maximises the
    mean fold accuracy; ties go to the smaller C, then the smaller delta,
    then the earlier grid entry.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(data) < folds:
        raise InsufficientData(f"{len(data)} windows cannot be split into {folds} folds")
    if not grid:
        raise ValueError("empty grid")
    scorer = scorer or _plain_accuracy
    bounds = temporal_folds(len(data), folds)
    results: list[list[float]] = [[] for _ in grid]
    for start, stop in bounds:
        train = list(data[:start]) + list(data[stop:])
        test = list(data[start:stop])
        models: dict[float, SvmModel | None] = {}
        for idx, (c, delta) in enumerate(grid):
            if c not in models:
                try:
                    models[c] = train_svm(train, c)
                except SingleClassTraining:
                    models[c] = None
            model = models[c]
            results[idx].append(math.nan if model is None else scorer(train, test, model, c, delta))

    means = []
    for accs in results:
        valid = [a for a in accs if not math.isnan(a)]
        means.append(sum(valid) / len(valid) if valid else math.nan)
    if all(math.isnan(m) for m in means):
        raise InsufficientData("no fold had both classes in its training part")
    best = min(
        (i for i in range(len(grid)) if not math.isnan(means[i])),
        key=lambda i: (-means[i], grid[i][0], grid[i][1], i),
    )
    return CvReport(list(grid), results, tuple(grid[best]), means)
