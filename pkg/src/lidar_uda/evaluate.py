"""Confusion matrices, IoU / mIoU, and report emission (tables, curves, label dumps)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .geometry import IGNORE_ID, SHARED_CLASSES

CSV_COLUMNS = ("run", "class", "iou", "present")


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    class_names: tuple = SHARED_CLASSES
    counts: np.ndarray = None

    def __post_init__(self):
        c = len(self.class_names)
        if self.counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (c, c):
            raise ValueError(f"counts must be {c}x{c}")
        if (self.counts < 0).any():
            raise ValueError("negative counts")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if tuple(other.class_names) != tuple(self.class_names):
            raise ValueError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.class_names, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.class_names, self.counts.copy())

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(tuple(d["class_names"]), np.array(d["counts"], dtype=np.int64))


def accumulate(cm: ConfusionMatrix, preds, labels, ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    """Add one count per non-ignored point to ``cm`` (in place) and return it."""
    preds = np.asarray(preds).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    c = cm.num_classes
    keep = labels != ignore_id
    p, l = preds[keep], labels[keep]
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ValueError(f"prediction out of range [0, {c})")
    if l.size and (l.min() < 0 or l.max() >= c):
        raise ValueError(f"label out of range [0, {c}) and not ignore_id")
    cm.counts += np.bincount(l * c + p, minlength=c * c).reshape(c, c)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(IoU per class, present mask); absent classes (zero denominator) get NaN."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(0) + counts.sum(1) - tp
    present = denom > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou, present


def mean_of_present(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("empty evaluation")
    return float(vals.mean())


def miou(cm: ConfusionMatrix) -> float:
    return mean_of_present(iou_per_class(cm)[0])


def fmt_pct(x: float) -> str:
    return "-" if np.isnan(x) else f"{100 * x:.1f}"


# ---------------------------------------------------------------------------
# Model evaluation


@torch.no_grad()
def predict(backbone, head, cloud, feats: torch.Tensor | None = None) -> np.ndarray:
    backbone.eval()
    head.eval()
    if feats is None:
        feats = backbone([cloud])
    return head(feats).argmax(1).numpy()


def evaluate_model(backbone, head, dataset, class_names=SHARED_CLASSES, features=None) -> ConfusionMatrix:
    """Confusion matrix of ``head(backbone(.))`` over every labelled frame.

    ``features`` optionally maps frame index to precomputed backbone features.
    """
    cm = ConfusionMatrix(tuple(class_names))
    for i in range(len(dataset)):
        cloud = dataset[i].cloud
        if cloud.labels is None:
            raise ValueError("evaluation needs labelled frames")
        pred = predict(backbone, head, cloud, None if features is None else features(i))
        accumulate(cm, pred, cloud.labels)
    return cm


# ---------------------------------------------------------------------------
# Reports


@dataclass
class RunResult:
    name: str
    cm: ConfusionMatrix
    log: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)  # frame name -> predicted ids

    @property
    def method(self) -> str:
        return self.name.split("/", 1)[0]

    @property
    def setting(self) -> str:
        return self.name.split("/", 1)[1] if "/" in self.name else "-"


def per_class_csv(runs: Sequence[RunResult]) -> str:
    """One row per (run, class); ``iou`` holds the full-precision value, empty when absent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in runs:
        iou, present = iou_per_class(r.cm)
        for name, v, p in zip(r.cm.class_names, iou, present):
            w.writerow([r.name, name, repr(float(v)) if p else "", int(p)])
        w.writerow([r.name, "mIoU", repr(miou(r.cm)), 1])
    return buf.getvalue()


def read_per_class_csv(text: str) -> dict:
    """Inverse of :func:`per_class_csv`: run -> {class: iou or nan}."""
    out: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["run"], {})[row["class"]] = float(row["iou"]) if row["iou"] else float("nan")
    return out


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def per_class_table(runs: Sequence[RunResult]) -> str:
    names = list(runs[0].cm.class_names)
    rows = [["run", *names, "mIoU"]]
    for r in runs:
        iou, _ = iou_per_class(r.cm)
        rows.append([r.name, *[fmt_pct(v) for v in iou], fmt_pct(miou(r.cm))])
    return _aligned(rows)


def summary_table(runs: Sequence[RunResult]) -> str:
    """Methods as rows, settings (e.g. source->target pairs) as columns, mIoU in percent."""
    settings = sorted({r.setting for r in runs})
    methods = sorted({r.method for r in runs})
    cell = {(r.method, r.setting): miou(r.cm) for r in runs}
    rows = [["method", *settings, "avg"]]
    for m in methods:
        vals = [cell.get((m, s), np.nan) for s in settings]
        avg = np.nanmean(vals) if not all(np.isnan(vals)) else np.nan
        rows.append([m, *[fmt_pct(v) for v in vals], fmt_pct(avg)])
    return _aligned(rows)


def plot_curves(run: RunResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    stages = sorted({rec.get("stage", "train") for rec in run.log})
    for st in stages:
        recs = [rec for rec in run.log if rec.get("stage", "train") == st]
        xs = np.arange(len(recs))
        if any("loss" in rec for rec in recs):
            axes[0].plot(xs, [rec.get("loss", np.nan) for rec in recs], marker=".", label=st)
        if any("miou" in rec for rec in recs):
            axes[1].plot(xs, [rec.get("miou", np.nan) for rec in recs], marker=".", label=st)
    axes[0].set_title("loss")
    axes[1].set_title("mIoU")
    for ax in axes:
        ax.set_xlabel("epoch")
        if ax.lines:
            ax.legend(fontsize=7)
    fig.suptitle(run.name, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def _safe(name: str) -> str:
    return name.replace("/", "__").replace(" ", "_")


def report(runs: Sequence[RunResult], out_dir) -> dict:
    """Write tables, curves and per-frame prediction dumps; returns the written paths."""
    if not runs:
        raise ValueError("report needs at least one run")
    runs = sorted(runs, key=lambda r: r.name)
    out = Path(out_dir)
    written: dict = {"curves": [], "predictions": []}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "per_class.csv").write_text(per_class_csv(runs))
        (out / "per_class.txt").write_text(per_class_table(runs))
        (out / "summary.txt").write_text(summary_table(runs))
        written.update(per_class_csv=str(out / "per_class.csv"), per_class_txt=str(out / "per_class.txt"),
                       summary=str(out / "summary.txt"))
        for r in runs:
            if r.log:
                p = out / "curves" / f"{_safe(r.name)}.png"
                p.parent.mkdir(exist_ok=True)
                plot_curves(r, p)
                written["curves"].append(str(p))
            for frame, pred in sorted(r.predictions.items()):
                d = out / "predictions" / _safe(r.name) / frame
                d.mkdir(parents=True, exist_ok=True)
                np.asarray(pred, dtype="<u4").tofile(d / "labels.bin")
                written["predictions"].append(str(d / "labels.bin"))
        (out / "runs.json").write_text(json.dumps(
            [{"name": r.name, "miou": miou(r.cm), "cm": r.cm.to_dict()} for r in runs], indent=1))
    except OSError as e:
        raise OSError(f"report: cannot write {e.filename or out}: {e.strerror}") from e
    return written
