"""Scene completion (SC) and semantic scene completion (SSC) metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import UNKNOWN

CLASS_NAMES = ("ceil.", "floor", "wall", "win.", "chair", "bed", "sofa", "table", "tvs", "furn.", "objs.")
EMPTY = 0


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def _region(pred, gt, mask) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    sel = gt != UNKNOWN
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError(f"mask {mask.shape} and ground truth {gt.shape} differ")
        sel &= mask
    return pred[sel], gt[sel]


@dataclass
class Confusion:
    """Mergeable SC and per-class SSC counts."""

    num_classes: int = 12
    sc_tp: int = 0
    sc_fp: int = 0
    sc_fn: int = 0
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def add_sc(self, pred, gt, mask=None) -> None:
        p, g = _region(pred, gt, mask)
        po, go = p != EMPTY, g != EMPTY
        self.sc_tp += int(np.count_nonzero(po & go))
        self.sc_fp += int(np.count_nonzero(po & ~go))
        self.sc_fn += int(np.count_nonzero(~po & go))

    def add_ssc(self, pred, gt, mask=None) -> None:
        p, g = _region(pred, gt, mask)
        k = self.num_classes
        p = np.clip(p.astype(np.int64), 0, k - 1)
        cm = np.bincount(g.astype(np.int64) * k + p, minlength=k * k).reshape(k, k)
        diag = np.diag(cm)
        self.tp += diag
        self.fp += cm.sum(axis=0) - diag
        self.fn += cm.sum(axis=1) - diag

    def merge(self, other: "Confusion") -> "Confusion":
        return Confusion(
            self.num_classes,
            self.sc_tp + other.sc_tp,
            self.sc_fp + other.sc_fp,
            self.sc_fn + other.sc_fn,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
        )

    def report(self) -> "EvalReport":
        class_iou = [
            _ratio(int(self.tp[c]), int(self.tp[c] + self.fp[c] + self.fn[c])) for c in range(1, self.num_classes)
        ]
        counts = {
            "sc_tp": self.sc_tp,
            "sc_fp": self.sc_fp,
            "sc_fn": self.sc_fn,
            **{f"tp_{c}": int(self.tp[c]) for c in range(1, self.num_classes)},
            **{f"fp_{c}": int(self.fp[c]) for c in range(1, self.num_classes)},
            **{f"fn_{c}": int(self.fn[c]) for c in range(1, self.num_classes)},
        }
        return EvalReport(
            precision=_ratio(self.sc_tp, self.sc_tp + self.sc_fp),
            recall=_ratio(self.sc_tp, self.sc_tp + self.sc_fn),
            iou=_ratio(self.sc_tp, self.sc_tp + self.sc_fp + self.sc_fn),
            class_iou=class_iou,
            counts=counts,
        )


def sc_metrics(pred, gt, mask=None) -> tuple[float, float, float]:
    """Binary occupancy precision, recall and IoU; NaN where undefined."""
    c = Confusion()
    c.add_sc(pred, gt, mask)
    r = c.report()
    return r.precision, r.recall, r.iou


def ssc_metrics(pred, gt, mask=None, num_classes: int = 12) -> tuple[list[float], float]:
    """Per non-empty class IoU (NaN for classes absent from both) and their mean."""
    c = Confusion(num_classes)
    c.add_ssc(pred, gt, mask)
    r = c.report()
    return r.class_iou, r.mean_iou


def _fmt(v: float, scale: float = 100.0) -> str:
    return "undefined" if math.isnan(v) else f"{v * scale:.1f}"


@dataclass
class EvalReport:
    precision: float
    recall: float
    iou: float
    class_iou: list
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def mean_iou(self) -> float:
        vals = [v for v in self.class_iou if not math.isnan(v)]
        return sum(vals) / len(vals) if vals else math.nan

    def columns(self) -> list[tuple[str, float]]:
        names = CLASS_NAMES if len(self.class_iou) == len(CLASS_NAMES) else [f"c{i}" for i in range(1, len(self.class_iou) + 1)]
        return [("prec.", self.precision), ("recall", self.recall), ("IoU", self.iou)] + list(
            zip(names, self.class_iou)
        ) + [("avg.", self.mean_iou)]

    def to_text(self) -> str:
        cols = self.columns()
        widths = [max(len(n), 9) for n, _ in cols]
        head = " ".join(n.rjust(w) for (n, _), w in zip(cols, widths))
        vals = " ".join(_fmt(v).rjust(w) for (_, v), w in zip(cols, widths))
        return head + "\n" + vals

    def to_kv(self) -> str:
        lines = [f"sc.precision={self.precision!r}", f"sc.recall={self.recall!r}", f"sc.iou={self.iou!r}"]
        names = CLASS_NAMES if len(self.class_iou) == len(CLASS_NAMES) else [f"c{i}" for i in range(1, len(self.class_iou) + 1)]
        lines += [f"ssc.iou.{n}={v!r}" for n, v in zip(names, self.class_iou)]
        lines.append(f"ssc.miou={self.mean_iou!r}")
        lines += [f"count.{k}={v}" for k, v in self.counts.items()]
        lines += [f"{k}={v!r}" for k, v in self.extra.items()]
        return "\n".join(lines)
