"""Classification metrics, fold reports and report comparison.

Metrics are fractions in [0, 1]. Quantities whose denominator is zero are
reported as ``None`` ("undefined") rather than 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float | None:
        return float(np.trace(self.counts) / self.total) if self.total else None


def confusion_matrix(true_labels, predicted_labels, C: int, classes: Sequence[str] | None = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label lists differ in length: {t.size} vs {p.size}")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError(f"labels must lie in [0, {C})")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = list(classes) if classes is not None else [str(i) for i in range(C)]
    return ConfusionMatrix(counts, names)


def _ratio(num, den):
    return float(num / den) if den else None


def _f1(p, r):
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def f1_score(precision: float | None, recall: float | None) -> float | None:
    return _f1(precision, recall)


def class_prf1(cm: ConfusionMatrix, cls: int):
    c = cm.counts
    tp = c[cls, cls]
    p = _ratio(tp, c[:, cls].sum())
    r = _ratio(tp, c[cls, :].sum())
    return p, r, _f1(p, r)


def prf1(cm: ConfusionMatrix, positive_class: int | str = "macro"):
    """Precision, recall and F1 for one class, or their macro averages.

    Macro averages skip classes where a value is undefined; if no class
    yields a value the average is undefined too.
    """
    if positive_class != "macro":
        return class_prf1(cm, int(positive_class))
    per = [class_prf1(cm, k) for k in range(len(cm.counts))]

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    return tuple(mean(col) for col in zip(*per))


def roc_curve(scores, labels):
    """ROC points (fpr, tpr, thresholds), one per distinct score, from (0,0) to (1,1)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thresholds = np.r_[np.inf, s[last]]
    return fpr, tpr, thresholds


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], xs.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    return ranks


def roc_auc(scores, labels):
    """Mann-Whitney AUC (ties count one half) plus the ROC curve points."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _average_ranks(s)
    auc = (ranks[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg)
    fpr, tpr, _ = roc_curve(s, y)
    return float(auc), list(zip(fpr.tolist(), tpr.tolist()))


def multiclass_auc(probs, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC needs at least two classes present")
    return float(np.mean([roc_auc(probs[:, c], labels == c)[0] for c in present]))


@dataclass
class TrainingCurves:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    val_acc: list[float | None] = field(default_factory=list)

    def to_dict(self):
        return {"train_loss": self.train_loss, "train_acc": self.train_acc,
                "val_loss": self.val_loss, "val_acc": self.val_acc}


@dataclass
class FoldReport:
    fold: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    auc: float | None
    confusion: ConfusionMatrix
    roc: dict[str, list[tuple[float, float]]]
    curves: TrainingCurves
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0

    def metric(self, name):
        return getattr(self, name)


def evaluate_predictions(fold: int, probs: np.ndarray, labels: np.ndarray, classes: list[str],
                         curves: TrainingCurves | None = None) -> FoldReport:
    """Fold metrics from class probabilities; binary uses class 1 as positive."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = len(classes)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, C, classes)
    if C == 2:
        p, r, f = prf1(cm, 1)
    else:
        p, r, f = prf1(cm, "macro")
    present = np.unique(labels)
    auc = None
    roc = {}
    if present.size >= 2:
        if C == 2:
            auc = roc_auc(probs[:, 1], labels == 1)[0]
        else:
            auc = multiclass_auc(probs, labels)
        for c in present:
            if 0 < (labels == c).sum() < labels.size:
                roc[classes[c]] = roc_auc(probs[:, c], labels == c)[1]
    return FoldReport(fold, cm.accuracy(), p, r, f, auc, cm, roc, curves or TrainingCurves(),
                      n_test=int(labels.size))


def aggregate(folds: Sequence[FoldReport]) -> dict[str, float | None]:
    out = {}
    for m in METRICS:
        vals = [getattr(f, m) for f in folds if getattr(f, m) is not None]
        out[m] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class RunReport:
    dataset: str
    model: str
    classes: list[str]
    config: dict
    folds: list[FoldReport]
    aggregate: dict[str, float | None]
    averaging: str = "binary"
    created_at: str | None = None

    @classmethod
    def from_folds(cls, dataset, model, classes, config, folds, created_at=None) -> "RunReport":
        averaging = "binary (positive class 1)" if len(classes) == 2 else "macro"
        return cls(dataset, model, list(classes), dict(config), list(folds), aggregate(folds),
                   averaging, created_at)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "created_at": self.created_at,
            "dataset": self.dataset,
            "model": self.model,
            "classes": self.classes,
            "averaging": self.averaging,
            "config": self.config,
            "aggregate": self.aggregate,
            "folds": [
                {
                    "fold": f.fold,
                    "n_train": f.n_train, "n_val": f.n_val, "n_test": f.n_test,
                    **{m: getattr(f, m) for m in METRICS},
                    "confusion": f.confusion.counts.tolist(),
                    "roc": {k: [list(pt) for pt in v] for k, v in f.roc.items()},
                    "curves": f.curves.to_dict(),
                }
                for f in self.folds
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, verify: bool = True) -> "RunReport":
        classes = list(d["classes"])
        folds = []
        for fd in d.get("folds", []):
            cm = ConfusionMatrix(np.asarray(fd["confusion"], dtype=np.int64), classes)
            c = fd["curves"]
            folds.append(FoldReport(fd["fold"], *(fd[m] for m in METRICS), cm,
                                    {k: [tuple(p) for p in v] for k, v in fd["roc"].items()},
                                    TrainingCurves(c["train_loss"], c["train_acc"], c["val_loss"], c["val_acc"]),
                                    fd.get("n_train", 0), fd.get("n_val", 0), fd.get("n_test", 0)))
        rep = cls(d["dataset"], d["model"], classes, d.get("config", {}), folds,
                  dict(d["aggregate"]), d.get("averaging", "binary"), d.get("created_at"))
        if verify:
            rep.verify()
        return rep

    @classmethod
    def load(cls, path, verify: bool = True) -> "RunReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), verify)

    def verify(self, tol: float = 1e-9) -> None:
        """Re-derive accuracies from confusion matrices and aggregates from folds."""
        for f in self.folds:
            acc = f.confusion.accuracy()
            if (acc is None) != (f.accuracy is None) or (acc is not None and abs(acc - f.accuracy) > 1e-12):
                raise ValueError(f"fold {f.fold}: stored accuracy {f.accuracy} disagrees with confusion matrix")
        if not self.folds:
            return
        for m, v in aggregate(self.folds).items():
            stored = self.aggregate.get(m)
            if (v is None) != (stored is None) or (v is not None and abs(v - stored) > tol):
                raise ValueError(f"aggregate {m}={stored} disagrees with fold mean {v}")


# -- comparison --------------------------------------------------------------

@dataclass
class Comparison:
    rows: list[dict]
    mean_accuracy_delta_pp: float
    model_a: str
    model_b: str

    def to_dict(self):
        return {"model_a": self.model_a, "model_b": self.model_b, "rows": self.rows,
                "mean_accuracy_delta_pp": self.mean_accuracy_delta_pp}

    def table(self) -> str:
        head = f"{'dataset':<12}" + "".join(f"{m + ' Δpp':>14}" for m in METRICS)
        lines = [f"{self.model_a} - {self.model_b}", head, "-" * len(head)]
        for r in self.rows:
            cells = "".join(f"{'-' if r[m] is None else format(r[m], '+.2f'):>14}" for m in METRICS)
            lines.append(f"{r['dataset']:<12}" + cells)
        lines.append(f"mean accuracy delta: {self.mean_accuracy_delta_pp:+.3f} pp")
        return "\n".join(lines)


def compare_reports(a: Sequence[RunReport] | RunReport, b: Sequence[RunReport] | RunReport) -> Comparison:
    """Per-dataset metric deltas ``a - b`` in percentage points."""
    a = [a] if isinstance(a, RunReport) else list(a)
    b = [b] if isinstance(b, RunReport) else list(b)
    amap = {r.dataset: r for r in a}
    bmap = {r.dataset: r for r in b}
    if set(amap) != set(bmap) or len(amap) != len(a) or len(bmap) != len(b):
        raise ValueError(f"dataset mismatch: {sorted(amap)} vs {sorted(bmap)}")
    rows = []
    for r in a:
        ra, rb = r.aggregate, bmap[r.dataset].aggregate
        row = {"dataset": r.dataset}
        for m in METRICS:
            va, vb = ra.get(m), rb.get(m)
            row[m] = None if va is None or vb is None else round(100 * (va - vb), 10)
        rows.append(row)
    deltas = [row["accuracy"] for row in rows if row["accuracy"] is not None]
    mean = float(np.mean(deltas)) if deltas else 0.0
    return Comparison(rows, mean, a[0].model if a else "", b[0].model if b else "")


def paper_tables() -> dict:
    with resources.files("mpnet.resources").joinpath("paper_tables.json").open() as fh:
        return json.load(fh)


def paper_reports(model: str) -> list[RunReport]:
    """Published aggregate results as fold-less reports (percentages become fractions)."""
    tables = paper_tables()
    rows = tables["results"][model]
    out = []
    for ds, vals in rows.items():
        agg = {m: (None if vals.get(m) is None else vals[m] / 100.0) for m in METRICS}
        classes = tables["datasets"][ds]["classes"]
        out.append(RunReport(ds, model, classes, {"source": "published tables"}, [], agg,
                             "as published"))
    return out
