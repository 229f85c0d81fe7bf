"""Task accuracy metrics: Pearson, Dice, AP50 with greedy IoU matching."""

import enum

import numpy as np
from scipy import ndimage

from bioslim.errors import DegenerateInput, ShapeMismatch
from bioslim.tensor import Tensor, as_array

AP_IOU_THRESHOLD = 0.5


def pearson(a, b) -> float:
    x = as_array(a).astype(np.float64).reshape(-1)
    y = as_array(b).astype(np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeMismatch(f"pearson of {x.size} and {y.size} elements")
    if x.size < 2:
        raise DegenerateInput("pearson needs at least two elements")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise DegenerateInput("pearson is undefined for a constant input")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))


def dice(pred, gt, threshold: float = 0.5) -> float:
    p = as_array(pred)
    g = as_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"dice of {list(p.shape)} and {list(g.shape)}")
    a = p > threshold
    b = g > 0
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _spatial(mask: np.ndarray) -> np.ndarray:
    # [1, 1, *spatial] maps drop their batch and channel axes
    if mask.ndim in (4, 5):
        if mask.shape[:2] != (1, 1):
            raise ShapeMismatch(f"expected a single-sample single-channel map, got {list(mask.shape)}")
        mask = mask[0, 0]
    if mask.ndim not in (2, 3):
        raise ShapeMismatch(f"labeling needs spatial rank 2 or 3, got {list(mask.shape)}")
    return mask


def connected_components(mask) -> Tensor:
    foreground = _spatial(as_array(mask)) > 0
    # rank-1 structure: 4-connectivity in 2-D, 6-connectivity in 3-D
    structure = ndimage.generate_binary_structure(foreground.ndim, 1)
    labels, _ = ndimage.label(foreground, structure=structure)
    return Tensor(labels.astype(np.int32))


def iou_matrix(pred: np.ndarray, gt: np.ndarray):
    pred_ids = np.unique(pred[pred > 0])
    gt_ids = np.unique(gt[gt > 0])
    if pred_ids.size == 0 or gt_ids.size == 0:
        return np.zeros((pred_ids.size, gt_ids.size)), pred_ids, gt_ids

    p_index = np.searchsorted(pred_ids, pred.reshape(-1))
    g_index = np.searchsorted(gt_ids, gt.reshape(-1))
    both = (pred.reshape(-1) > 0) & (gt.reshape(-1) > 0)
    intersection = np.zeros((pred_ids.size, gt_ids.size), dtype=np.int64)
    np.add.at(intersection, (p_index[both], g_index[both]), 1)

    p_area = np.array([(pred == i).sum() for i in pred_ids])
    g_area = np.array([(gt == i).sum() for i in gt_ids])
    union = p_area[:, None] + g_area[None, :] - intersection
    return intersection / np.maximum(union, 1), pred_ids, gt_ids


def match_instances(pred, gt, threshold: float = AP_IOU_THRESHOLD):
    """Greedy matching in descending IoU order; returns (tp, fp, fn)."""
    p = _spatial(as_array(pred))
    g = _spatial(as_array(gt))
    if p.shape != g.shape:
        raise ShapeMismatch(f"label maps {list(p.shape)} and {list(g.shape)} differ")
    ious, pred_ids, gt_ids = iou_matrix(p, g)

    candidates = [(ious[i, j], i, j) for i, j in zip(*np.nonzero(ious >= threshold))]
    # ties resolve by (pred index, gt index) for determinism
    candidates.sort(key=lambda item: (-item[0], item[1], item[2]))
    used_pred, used_gt = set(), set()
    for _, i, j in candidates:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)

    tp = len(used_pred)
    return tp, pred_ids.size - tp, gt_ids.size - tp


def ap50(pred, gt) -> float:
    tp, fp, fn = match_instances(pred, gt, AP_IOU_THRESHOLD)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def ap50_from_probability(prob, gt_labels, threshold: float = 0.5) -> float:
    return ap50(connected_components(as_array(prob) > threshold), gt_labels)


class MetricName(str, enum.Enum):
    PEARSON = "pearson"
    DICE = "dice"
    AP50 = "ap50"


def score(name: MetricName, pred, target, threshold: float = 0.5) -> float:
    name = MetricName(name)
    if name is MetricName.PEARSON:
        return pearson(pred, target)
    if name is MetricName.DICE:
        return dice(pred, target, threshold)
    return ap50_from_probability(pred, target, threshold)
