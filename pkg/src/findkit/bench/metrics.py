"""Segmentation and retrieval metrics."""
from __future__ import annotations

import warnings

import numpy as np

from .. import kernels


class MetricError(ValueError):
    pass


def _pairs(pred_masks, gt_masks):
    pred = [np.asarray(m, dtype=bool) for m in pred_masks]
    gt = [np.asarray(m, dtype=bool) for m in gt_masks]
    if len(pred) != len(gt):
        raise MetricError(f"{len(pred)} predictions vs {len(gt)} ground truths")
    for k, (p, g) in enumerate(zip(pred, gt)):
        if p.shape != g.shape:
            raise MetricError(f"pair {k}: grid {p.shape} vs {g.shape}")
    return pred, gt


def pair_iou(p: np.ndarray, g: np.ndarray) -> float:
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0       # empty vs empty
    return float(np.logical_and(p, g).sum() / union)


def metric_ciou(pred_masks, gt_masks) -> float:
    """Pooled IoU: total intersection over total union."""
    pred, gt = _pairs(pred_masks, gt_masks)
    inter = sum(int(np.logical_and(p, g).sum()) for p, g in zip(pred, gt))
    union = sum(int(np.logical_or(p, g).sum()) for p, g in zip(pred, gt))
    if union == 0:
        return 1.0
    return inter / union


def metric_miou(pred_masks, gt_masks) -> float:
    pred, gt = _pairs(pred_masks, gt_masks)
    if not pred:
        raise MetricError("no pairs")
    return float(np.mean([pair_iou(p, g) for p, g in zip(pred, gt)]))


def metric_ir_at_k(rankings, gt_targets, k: int) -> float:
    """Fraction of queries whose target is among the first ``k`` ranked items."""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    if len(rankings) != len(gt_targets):
        raise MetricError(f"{len(rankings)} rankings vs {len(gt_targets)} targets")
    if not rankings:
        raise MetricError("no queries")
    hits = 0
    warned = False
    for ranking, target in zip(rankings, gt_targets):
        ranking = list(ranking)
        kk = k
        if k > len(ranking):
            if not warned:
                warnings.warn(f"k={k} exceeds corpus size {len(ranking)}; clamping", stacklevel=2)
                warned = True
            kk = len(ranking)
        hits += target in ranking[:kk]
    return hits / len(rankings)


def _check_partition(labels, cats, name, allow_void):
    lab = np.asarray(labels)
    if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
        raise MetricError(f"{name}: labels must be a 2-D integer grid")
    lo = -1 if allow_void else 0
    if lab.size and lab.min() < lo:
        raise MetricError(f"{name}: label below {lo} (not a partition)")
    used = set(np.unique(lab[lab >= 0]).tolist())
    missing = used - set(cats)
    if missing:
        raise MetricError(f"{name}: labels {sorted(missing)} have no category")
    return lab.astype(np.int64), used


def metric_pq(pred_partition, gt_partition) -> float:
    """Panoptic quality with matches at IoU > 0.5 between same-category segments.

    Each partition is ``(labels, {label: category})``; prediction labels may
    be -1 (void).  Returns 1.0 when both sides have no segments.
    """
    p_lab, p_cat = pred_partition
    g_lab, g_cat = gt_partition
    p_lab, p_used = _check_partition(p_lab, p_cat, "prediction", allow_void=True)
    g_lab, g_used = _check_partition(g_lab, g_cat, "ground truth", allow_void=False)
    if p_lab.shape != g_lab.shape:
        raise MetricError(f"grid {p_lab.shape} vs {g_lab.shape}")
    p_ids, g_ids = sorted(p_used), sorted(g_used)
    if not p_ids and not g_ids:
        return 1.0
    p_index = np.full(max(p_ids, default=-1) + 2, -1, dtype=np.int64)
    p_index[p_ids] = np.arange(len(p_ids))
    g_index = np.full(max(g_ids, default=-1) + 2, -1, dtype=np.int64)
    g_index[g_ids] = np.arange(len(g_ids))
    pl = np.where(p_lab >= 0, p_index[np.maximum(p_lab, 0)], -1)
    gl = g_index[g_lab]
    inter = kernels.label_contingency(pl.ravel(), gl.ravel(), len(p_ids), len(g_ids))
    p_area = np.bincount(pl[pl >= 0].ravel(), minlength=len(p_ids))
    g_area = np.bincount(gl.ravel(), minlength=len(g_ids))
    tp_iou, matched_p, matched_g = 0.0, set(), set()
    for a, pid in enumerate(p_ids):
        for b, gid in enumerate(g_ids):
            if p_cat[pid] != g_cat[gid] or inter[a, b] == 0:
                continue
            iou = inter[a, b] / (p_area[a] + g_area[b] - inter[a, b])
            if iou > 0.5:       # unique by the >0.5 argument
                tp_iou += iou
                matched_p.add(a)
                matched_g.add(b)
    tp = len(matched_p)
    fp = len(p_ids) - tp
    fn = len(g_ids) - len(matched_g)
    return tp_iou / (tp + 0.5 * fp + 0.5 * fn)
