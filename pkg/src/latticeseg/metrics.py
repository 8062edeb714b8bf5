"""Evaluation metrics: accuracy, per-class IoU / mIoU, Dice, and Symmetric Best Dice."""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def confusion_matrix(pred, gt, n_classes):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise InvalidInputError("prediction and ground truth lengths differ")
    keep = (gt >= 0) & (pred >= 0)
    return np.bincount(gt[keep] * n_classes + pred[keep], minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def miou(pred, gt, n_classes):
    """Per-class IoU (NaN for classes absent from both) and their mean.

    Points with ground-truth label -1 are ignored.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def accuracy(pred, gt, cls=None):
    """Fraction of labelled points predicted correctly, optionally only those of class ``cls``."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt >= 0 if cls is None else gt == cls
    if not keep.any():
        return float("nan")
    return float(np.mean(pred[keep] == gt[keep]))


def dice(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 2.0 * np.logical_and(a, b).sum() / denom if denom else 1.0


def _best_dice(overlap, size_a, size_b):
    d = 2.0 * overlap / (size_a[:, None] + size_b[None, :])
    return float(d.max(axis=1).mean())


def sbd(pred, gt):
    """Symmetric Best Dice between two instance partitions of the same points.

    Points labelled -1 in both partitions are dropped; elsewhere -1 is treated
    as an ordinary label.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise InvalidInputError("partitions must cover the same points")
    keep = (pred >= 0) | (gt >= 0)
    pred, gt = pred[keep], gt[keep]
    if len(pred) == 0:
        raise InvalidInputError("empty partition")
    ua, ia = np.unique(pred, return_inverse=True)
    ub, ib = np.unique(gt, return_inverse=True)
    overlap = np.zeros((len(ua), len(ub)))
    np.add.at(overlap, (ia, ib), 1.0)
    sa = overlap.sum(axis=1)
    sb = overlap.sum(axis=0)
    return min(_best_dice(overlap, sa, sb), _best_dice(overlap.T, sb, sa))
