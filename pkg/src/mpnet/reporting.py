"""Write run and comparison artifacts: JSON, CSV tables and SVG panels."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from importlib import resources
from pathlib import Path

from . import plotting
from .metrics import Comparison, RunReport


def report_schema() -> dict:
    with resources.files("mpnet.resources").joinpath("report.schema.json").open() as fh:
        return json.load(fh)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def curves_csv(report: RunReport) -> str:
    rows = []
    for f in report.folds:
        c = f.curves
        for e in range(len(c.train_loss)):
            rows.append([f.fold, e + 1, c.train_loss[e], c.train_acc[e],
                         "" if c.val_loss[e] is None else c.val_loss[e],
                         "" if c.val_acc[e] is None else c.val_acc[e]])
    return _csv(["fold", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"], rows)


def roc_csv(report: RunReport) -> str:
    rows = [[f.fold, cls, fpr, tpr] for f in report.folds for cls, pts in f.roc.items() for fpr, tpr in pts]
    return _csv(["fold", "class", "fpr", "tpr"], rows)


def confusion_csv(report: RunReport) -> str:
    rows = []
    for f in report.folds:
        for i, t in enumerate(report.classes):
            for j, p in enumerate(report.classes):
                rows.append([f.fold, t, p, int(f.confusion.counts[i, j])])
    return _csv(["fold", "true_class", "predicted_class", "count"], rows)


def _atomic_write(path: Path, data: str | bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _save_figure(fig, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".svg")
    os.close(fd)
    plotting.save_svg(fig, tmp)
    os.replace(tmp, path)


def write_run(report: RunReport, out_dir, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.json": report.to_json(),
        "curves.csv": curves_csv(report),
        "roc.csv": roc_csv(report),
        "confusion.csv": confusion_csv(report),
    }
    written = []
    for name, text in files.items():
        _atomic_write(out / name, text)
        written.append(out / name)
    if plots and report.folds:
        panels = {
            "accuracy.svg": plotting.curve_panel(report, "acc"),
            "loss.svg": plotting.curve_panel(report, "loss"),
            "roc.svg": plotting.roc_panel(report),
            "confusion.svg": plotting.confusion_panel(report),
        }
        for name, fig in panels.items():
            _save_figure(fig, out / name)
            written.append(out / name)
    return written


def write_comparison(comparison: Comparison, reports_a, reports_b, out_dir, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "compare.json", json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = [[r["dataset"], *("" if r[m] is None else r[m] for m in ("accuracy", "precision", "recall", "f1", "auc"))]
            for r in comparison.rows]
    _atomic_write(out / "compare.csv", _csv(["dataset", "accuracy_pp", "precision_pp", "recall_pp",
                                             "f1_pp", "auc_pp"], rows))
    written = [out / "compare.json", out / "compare.csv"]
    if plots:
        _save_figure(plotting.grouped_accuracy_panel(reports_a, reports_b), out / "accuracy_comparison.svg")
        _save_figure(plotting.comparison_panel(comparison), out / "accuracy_delta.svg")
        written += [out / "accuracy_comparison.svg", out / "accuracy_delta.svg"]
    return written
