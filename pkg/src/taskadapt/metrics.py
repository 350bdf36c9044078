"""Dense-prediction metrics with order-deterministic accumulators.

All accumulators reduce in float64 over whole splits (not per-image
averages), so results are independent of batch size and identical
across re-runs. Percent-style metrics (mIoU, F1, precision, recall)
are reported on a 0-100 scale; angular error in degrees; RMSE in the
depth units of the data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


class SegAccumulator:
    """Global confusion matrix for k-class segmentation."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
        idx = gt.reshape(-1).astype(np.int64) * self.n_classes + pred.reshape(-1).astype(np.int64)
        self.confusion += np.bincount(idx, minlength=self.n_classes ** 2).reshape(
            self.n_classes, self.n_classes)

    def per_class_iou(self) -> np.ndarray:
        tp = np.diag(self.confusion).astype(np.float64)
        fp = self.confusion.sum(axis=0) - tp
        fn = self.confusion.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            iou = np.where(denom > 0, tp / np.maximum(denom, 1), 0.0)
        return iou

    def miou(self, include_absent: bool = False) -> float:
        """Mean IoU (percent) over classes present in the ground truth.

        ``include_absent`` additionally counts classes that appear only
        in predictions (each contributing IoU 0). An entirely empty
        confusion matrix scores 100.
        """
        tp = np.diag(self.confusion)
        fn = self.confusion.sum(axis=1) - tp
        fp = self.confusion.sum(axis=0) - tp
        present = (tp + fn) > 0
        if include_absent:
            present = present | ((tp + fp) > 0)
        if not present.any():
            return 100.0
        return float(self.per_class_iou()[present].mean() * 100.0)


class RmseAccumulator:
    """Root mean squared error over every pixel of a split."""

    def __init__(self):
        self.sum_sq = 0.0
        self.count = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
        diff = pred.astype(np.float64) - gt.astype(np.float64)
        self.sum_sq += float(np.sum(diff * diff))
        self.count += diff.size

    def value(self) -> float:
        if self.count == 0:
            return 0.0
        return float(np.sqrt(self.sum_sq / self.count))


class AngleAccumulator:
    """Mean angular error (degrees) between unit-vector fields."""

    def __init__(self):
        self.sum_deg = 0.0
        self.count = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
        p = pred.astype(np.float64)
        g = gt.astype(np.float64)
        p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
        g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        dot = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
        ang = np.degrees(np.arccos(dot))
        self.sum_deg += float(ang.sum())
        self.count += ang.size

    def value(self) -> float:
        if self.count == 0:
            return 0.0
        return float(self.sum_deg / self.count)


class EdgeAccumulator:
    """Binary-map F1 with ``tp/fp/fn`` pooled over the split.

    Conventions: no positives anywhere (tp=fp=fn=0) scores 100; positives
    exist but none are hit (tp=0 with fp+fn>0) scores 0.
    """

    def __init__(self):
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
        p = pred.astype(bool)
        g = gt.astype(bool)
        self.tp += int(np.count_nonzero(p & g))
        self.fp += int(np.count_nonzero(p & ~g))
        self.fn += int(np.count_nonzero(~p & g))

    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 100.0
        return 100.0 * self.tp / (self.tp + self.fp)

    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 100.0
        return 100.0 * self.tp / (self.tp + self.fn)

    def f1(self) -> float:
        if self.tp + self.fp + self.fn == 0:
            return 100.0
        return 100.0 * 2.0 * self.tp / (2.0 * self.tp + self.fp + self.fn)


# -- one-shot helpers --------------------------------------------------


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int,
         include_absent: bool = False) -> float:
    acc = SegAccumulator(n_classes)
    acc.update(pred, gt)
    return acc.miou(include_absent=include_absent)


def depth_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    acc = RmseAccumulator()
    acc.update(pred, gt)
    return acc.value()


def normal_mean_angle_deg(pred: np.ndarray, gt: np.ndarray) -> float:
    acc = AngleAccumulator()
    acc.update(pred, gt)
    return acc.value()


def edge_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    acc = EdgeAccumulator()
    acc.update(pred, gt)
    return acc.f1()


@dataclass
class MetricsReport:
    """A named bundle of per-task metric values for one split."""

    split: str
    domain: str = ""
    values: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"split": self.split, "domain": self.domain, "metrics": self.values}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        m = self.values
        cells = [self.split, self.domain,
                 f"{m['segmentation']['miou']:.6f}",
                 f"{m['depth']['rmse']:.6f}",
                 f"{m['normal']['mean_angle_deg']:.6f}",
                 f"{m['edge']['f1']:.6f}"]
        return ",".join(cells)

    CSV_HEADER = "split,domain,seg_miou,depth_rmse,normal_mangle_deg,edge_f1"

    @staticmethod
    def from_accumulators(split: str, domain: str, seg: SegAccumulator,
                          rmse: RmseAccumulator, angle: AngleAccumulator,
                          edge: EdgeAccumulator) -> "MetricsReport":
        values = {
            "segmentation": {
                "miou": seg.miou(),
                "per_class_iou": [float(v) for v in seg.per_class_iou()],
            },
            "depth": {"rmse": rmse.value()},
            "normal": {"mean_angle_deg": angle.value()},
            "edge": {"f1": edge.f1(), "precision": edge.precision(),
                     "recall": edge.recall()},
        }
        return MetricsReport(split=split, domain=domain, values=values)
