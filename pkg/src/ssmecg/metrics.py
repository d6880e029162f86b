"""Classification / regression metrics, the anxiety target and fold reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(y_true == y_pred))


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("confusion matrix of an empty set is undefined")
    if y_true.min() < 0 or y_pred.min() < 0 or y_true.max() >= k or y_pred.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return np.bincount(k * y_true + y_pred, minlength=k * k).reshape(k, k)


def f1_per_class(y_true, y_pred, k: int) -> np.ndarray:
    """Per-class F1; a class absent from both truth and prediction scores 0."""
    cm = confusion_matrix(y_true, y_pred, k)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    return np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)


def f1_macro(y_true, y_pred, k: int | None = None) -> float:
    if k is None:
        k = int(max(np.max(y_true), np.max(y_pred))) + 1
    return float(np.mean(f1_per_class(y_true, y_pred, k)))


def f1_macro_multilabel(Y_true, Y_pred) -> float:
    """Mean over label columns of binary F1 (positive class only)."""
    Y_true = np.asarray(Y_true).astype(bool)
    Y_pred = np.asarray(Y_pred).astype(bool)
    scores = []
    for j in range(Y_true.shape[1]):
        t, p = Y_true[:, j], Y_pred[:, j]
        tp = np.sum(t & p)
        denom = 2 * tp + np.sum(~t & p) + np.sum(t & ~p)
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def binary_auroc(labels, scores) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auroc_macro(Y_true, scores, return_skipped: bool = False):
    """Macro AUROC over label columns; columns lacking either class are skipped."""
    Y_true = np.asarray(Y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if Y_true.ndim == 1:
        Y_true, scores = Y_true[:, None], scores[:, None]
    values, skipped = [], []
    for j in range(Y_true.shape[1]):
        col = Y_true[:, j].astype(bool)
        if col.all() or not col.any():
            skipped.append(j)
            continue
        values.append(binary_auroc(col, scores[:, j]))
    if not values:
        raise ValueError("no class has both positive and negative examples")
    result = float(np.mean(values))
    return (result, skipped) if return_skipped else result


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population moments."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("ccc needs two sequences of equal length >= 2")
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom == 0:
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(2 * cov / denom)


def anxiety_target(arousal, valence, arousal_range=(0.0, 1.0), valence_range=(0.0, 1.0)):
    """``N = A (1 - V)`` after rescaling arousal and valence to [0, 1]."""
    a = (np.asarray(arousal, dtype=np.float64) - arousal_range[0]) / (arousal_range[1] - arousal_range[0])
    v = (np.asarray(valence, dtype=np.float64) - valence_range[0]) / (valence_range[1] - valence_range[0])
    tol = 1e-12
    if np.any(a < -tol) or np.any(a > 1 + tol) or np.any(v < -tol) or np.any(v > 1 + tol):
        raise ValueError("arousal/valence fall outside their declared range")
    n = np.clip(a, 0, 1) * (1 - np.clip(v, 0, 1))
    return float(n) if n.ndim == 0 else n


def task_metrics(kind: str, y_true, outputs, n_classes: int | None = None) -> dict:
    """Metrics reported for each task kind.

    ``outputs`` are class probabilities (classification), per-label
    probabilities (multilabel) or predicted values (regression).
    """
    y_true = np.asarray(y_true)
    outputs = np.asarray(outputs, dtype=np.float64)
    if kind == "classification":
        pred = outputs.argmax(axis=1)
        k = n_classes or outputs.shape[1]
        return {"accuracy": accuracy(y_true, pred), "f1_macro": f1_macro(y_true, pred, k)}
    if kind == "multilabel":
        out = {"f1_macro": f1_macro_multilabel(y_true, outputs >= 0.5)}
        try:
            out["auroc"] = auroc_macro(y_true, outputs)
        except ValueError:
            pass
        return out
    if kind == "regression":
        y2 = y_true.reshape(len(y_true), -1)
        o2 = outputs.reshape(len(outputs), -1)
        values = [ccc(y2[:, j], o2[:, j]) for j in range(y2.shape[1])]
        return {"ccc": float(np.mean(values))}
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass
class EvalReport:
    task: str
    split_mode: str
    per_fold: list[dict]
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        keys = sorted({k for f in self.per_fold for k in f})
        out = {}
        for k in keys:
            vals = np.array([f[k] for f in self.per_fold if k in f], dtype=np.float64)
            out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        return {"task": self.task, "split_mode": self.split_mode, "per_fold": self.per_fold,
                "aggregate": self.aggregate, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        parts = [f"{k}={v['mean']:.3f} ({v['std']:.3f})" for k, v in self.aggregate.items()]
        return f"{self.task} [{self.split_mode}]: " + ", ".join(parts)
