"""Change-class confusion counts and F1 / IoU / OA."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    __add__ = merge


def _binary(a, what):
    arr = np.asarray(a)
    if arr.dtype == bool:
        return arr
    ok = (arr == 0) | (arr == 1)
    if not np.all(ok):
        bad = np.unique(arr[~ok])[:5].tolist()
        raise DataError(f"{what} must be binary {{0, 1}}, found values {bad}")
    return arr.astype(bool)


def accumulate(counts: ConfusionCounts | None, pred, gt) -> ConfusionCounts:
    """Add pixel-wise counts of ``pred`` against ``gt`` (change = 1 is positive)."""
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    new = ConfusionCounts(tp, fp, fn, tn)
    return new if counts is None else counts.merge(new)


merge = ConfusionCounts.merge


@dataclass(frozen=True)
class Scores:
    f1: float
    iou: float
    oa: float
    precision: float
    recall: float
    undefined: bool  # no change pixels in either pred or gt; f1/iou reported as 0

    def as_percent(self) -> dict:
        return {k: round(100.0 * getattr(self, k), 2) for k in ("f1", "iou", "oa")}


def scores(counts: ConfusionCounts) -> Scores:
    """Micro-averaged scores for the change class.

    Zero denominators give 0.  When tp = fp = fn = 0 (nothing changed, nothing
    predicted) f1 and iou are reported as 0 with ``undefined=True`` rather than 1.
    """
    if counts.total <= 0:
        raise ContractError("cannot score an empty confusion matrix")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    oa = (tp + tn) / counts.total
    return Scores(f1, iou, oa, precision, recall, undefined=(tp + fp + fn == 0))


def evaluate(preds, gts) -> tuple[ConfusionCounts, Scores]:
    counts = ConfusionCounts()
    for p, g in zip(preds, gts):
        counts = accumulate(counts, p, g)
    return counts, scores(counts)


def report_dict(counts: ConfusionCounts) -> dict:
    s = scores(counts)
    return {"f1": s.f1, "iou": s.iou, "oa": s.oa, "precision": s.precision, "recall": s.recall,
            "undefined": s.undefined, "counts": asdict(counts)}


def to_json(counts: ConfusionCounts) -> str:
    return json.dumps(report_dict(counts), indent=2, sort_keys=True)


def from_json(text: str) -> ConfusionCounts:
    d = json.loads(text)
    c = d["counts"]
    return ConfusionCounts(int(c["tp"]), int(c["fp"]), int(c["fn"]), int(c["tn"]))


def format_table(rows: list[tuple[str, ConfusionCounts]], label: str = "run") -> str:
    """Plain-text table of F1 / IoU / OA in percent, two decimals."""
    width = max([len(label)] + [len(name) for name, _ in rows])
    lines = [f"{label:<{width}}  {'F1':>6}  {'IoU':>6}  {'OA':>6}",
             "-" * (width + 24)]
    for name, c in rows:
        p = scores(c).as_percent()
        lines.append(f"{name:<{width}}  {p['f1']:6.2f}  {p['iou']:6.2f}  {p['oa']:6.2f}")
    return "\n".join(lines)
