import numpy as np
from sklearn.metrics import confusion_matrix

from src.utils.errors import ShapeError


def iou_counts(pred, gt, cls=1):
    """(intersection, union) pixel counts of class `cls`."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f'prediction {pred.shape} and ground truth {gt.shape} differ in shape')
    cm = confusion_matrix((gt == cls).ravel(), (pred == cls).ravel(), labels=[False, True])
    tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
    return int(tp), int(tp + fp + fn)


def iou(pred, gt, cls=1):
    """Intersection over union of class `cls`; 1.0 when both sets are empty."""
    intersection, union = iou_counts(pred, gt, cls)
    return 1.0 if union == 0 else intersection / union


def cumulative_iou(pairs, cls=1):
    """Dataset-level IoU from summed counts over (pred, gt) pairs."""
    intersection = union = 0
    for pred, gt in pairs:
        i, u = iou_counts(pred, gt, cls)
        intersection += i
        union += u
    return 1.0 if union == 0 else intersection / union
