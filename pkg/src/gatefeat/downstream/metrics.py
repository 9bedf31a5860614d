from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

IGNORE_INDEX = 255


@dataclass
class SegmentationScores:
    miou: float
    aacc: float
    macc: float
    per_class_iou: list[float]

    def as_tuple(self):
        return (self.miou, self.aacc, self.macc)


def confusion_matrix(pred, gt, classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    p = np.asarray(pred).astype(np.int64).ravel()
    g = np.asarray(gt).astype(np.int64).ravel()
    if p.shape != g.shape:
        raise ValidationError("prediction and ground truth differ in size")
    keep = g != ignore_index
    p, g = p[keep], g[keep]
    if ((g < 0) | (g >= classes)).any() or ((p < 0) | (p >= classes)).any():
        raise ValidationError(f"label outside [0, {classes})")
    return np.bincount(g * classes + p, minlength=classes * classes).reshape(classes, classes)


def miou(preds, gts, classes: int, ignore_index: int = IGNORE_INDEX) -> SegmentationScores:
    """Dataset-level mIoU, overall pixel accuracy and mean class accuracy.

    Pixels labelled ``ignore_index`` in the ground truth are dropped. Classes
    absent from both prediction and ground truth are excluded from the
    means; mAcc averages over classes present in the ground truth.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ValidationError("different number of predictions and ground truths")
    cm = np.zeros((classes, classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValidationError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
        cm += confusion_matrix(p, g, classes, ignore_index)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    total = cm.sum()
    if total == 0:
        raise ValidationError("no labelled pixels")
    iou = np.full(classes, np.nan)
    np.divide(tp, union, out=iou, where=union > 0)
    acc = np.full(classes, np.nan)
    np.divide(tp, gt_count, out=acc, where=gt_count > 0)
    return SegmentationScores(
        miou=float(np.nanmean(iou)),
        aacc=float(tp.sum() / total),
        macc=float(np.nanmean(acc)),
        per_class_iou=[float(v) for v in iou],
    )
