"""Segmentation and contrastive losses, set matching, and their weighted sum.

Set-prediction terms (pano, grd, iseg, intg) first assign object queries to
ground-truth targets with a Hungarian match on a fixed cost, then score the
matched pairs.  The matching cost does not depend on the loss weights, so the
total is exactly linear in the weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, ShapeError, _sigmoid_np, log_softmax, mean, sigmoid, softplus, transpose, tsum


class LossError(ValueError):
    pass


def _check_pair(logits: Tensor, gt) -> np.ndarray:
    g = np.asarray(gt, dtype=np.float64)
    if logits.shape != g.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {g.shape}")
    return g


def bce_mask_loss(logits: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy with logits."""
    g = _check_pair(logits, gt)
    return mean(softplus(logits) - logits * Tensor._wrap(g))


DICE_EPS = 1.0


def dice_loss(logits: Tensor, gt, eps: float = DICE_EPS) -> Tensor:
    g = _check_pair(logits, gt)
    if logits.data.ndim != 2:
        raise ShapeError(f"dice_loss expects [n x p], got {logits.shape}")
    p = sigmoid(logits)
    num = tsum(p * Tensor._wrap(g), axis=1) * 2.0 + eps
    den = tsum(p, axis=1) + Tensor._wrap(g.sum(axis=1) + eps)
    return mean(1.0 - num / den)


def ce_class_loss(scores: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy; ``weights`` (per class) give a weighted mean."""
    if scores.data.ndim != 2:
        raise ShapeError(f"scores must be [n x c], got {scores.shape}")
    n, c = scores.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ShapeError(f"{n} score rows vs {lab.shape[0]} labels")
    bad = lab[(lab < 0) | (lab >= c)]
    if bad.size:
        raise LossError(f"label {int(bad[0])} out of range [0, {c})")
    picked = log_softmax(scores)[np.arange(n), lab]
    if weights is None:
        return -mean(picked)
    w = np.asarray(weights, dtype=np.float64)[lab]
    return -tsum(picked * Tensor._wrap(w)) * (1.0 / w.sum())


def contrastive_loss(score: Tensor) -> Tensor:
    """Symmetric InfoNCE with the diagonal as positives."""
    if score.data.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ShapeError(f"contrastive_loss needs a square matrix, got {score.shape}")
    n = score.shape[0]
    if n < 2:
        raise LossError(f"contrastive_loss needs n >= 2, got {n}")
    diag = np.arange(n)
    return (ce_class_loss(score, diag) + ce_class_loss(transpose(score), diag)) * 0.5


# ------------------------------------------------------------------ matching

@dataclass
class MatchAssignment:
    pairs: list                   # [(pred_idx, gt_idx)] sorted by pred
    n_pred: int
    n_gt: int

    @property
    def no_object(self) -> list:
        hit = {p for p, _ in self.pairs}
        return [i for i in range(self.n_pred) if i not in hit]

    def gt_to_pred(self) -> dict:
        return {g: p for p, g in self.pairs}


def hungarian_match(cost) -> MatchAssignment:
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        return MatchAssignment([], n, m)
    if not np.all(np.isfinite(c)):
        raise LossError("cost contains non-finite values")
    rows, cols = kernels.linear_sum_assignment(c)
    return MatchAssignment(sorted(zip(rows.tolist(), cols.tolist())), n, m)


# fixed matching-cost coefficients (class, bce, dice)
MATCH_COST = (2.0, 5.0, 5.0)


def _pairwise_bce(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    sp = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return (sp.sum(axis=1)[:, None] - x @ g.T) / x.shape[1]


def _pairwise_dice(x: np.ndarray, g: np.ndarray, eps: float = DICE_EPS) -> np.ndarray:
    p = _sigmoid_np(x)
    return 1.0 - (2.0 * p @ g.T + eps) / (p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + eps)


def match_cost(mask_logits: np.ndarray, gt_masks: np.ndarray, class_prob: np.ndarray,
               coef=MATCH_COST) -> np.ndarray:
    """[n_pred x n_gt] cost: a*(-p_class) + b*BCE + c*DICE."""
    a, b, c = coef
    g = np.asarray(gt_masks, dtype=np.float64)
    return -a * class_prob + b * _pairwise_bce(mask_logits, g) + c * _pairwise_dice(mask_logits, g)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------------ combination

@dataclass
class LossWeights:
    """Defaults are project choices; the segmentation triples are (class, bce, dice)
    except interleave grounding, which is (class, dice, pixel-ce) in that order."""
    alpha_p: float = 2.0
    beta_p: float = 5.0
    gamma_p: float = 5.0
    alpha_g: float = 2.0
    beta_g: float = 5.0
    gamma_g: float = 5.0
    alpha_i: float = 2.0
    beta_i: float = 5.0
    gamma_i: float = 5.0
    theta: float = 1.0
    phi: float = 1.0
    alpha_ig: float = 2.0
    beta_ig: float = 5.0
    gamma_ig: float = 5.0

    def validate(self) -> "LossWeights":
        vals = asdict(self)
        for k, v in vals.items():
            if not np.isfinite(v) or v < 0:
                raise LossError(f"loss weight {k} must be a nonnegative float, got {v}")
        if not any(v > 0 for v in vals.values()):
            raise LossError("at least one loss weight must be positive")
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def restricted(self, keys) -> "LossWeights":
        """Copy with every term outside the task keys ``keys`` set to zero."""
        keys = set(keys)
        d = self.as_dict()
        for key, wname in TERMS.values():
            if key not in keys:
                d[wname] = 0.0
        return LossWeights(**d)

    def any_active(self) -> bool:
        return any(v > 0 for v in self.as_dict().values())

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise LossError(f"unknown loss weights {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()}).validate()


# term name -> (task key, weight field)
TERMS = {
    "CE_pano": ("pano", "alpha_p"), "BCE_pano": ("pano", "beta_p"), "DICE_pano": ("pano", "gamma_p"),
    "CE_grd": ("grd", "alpha_g"), "BCE_grd": ("grd", "beta_g"), "DICE_grd": ("grd", "gamma_g"),
    "CE_iseg": ("iseg", "alpha_i"), "BCE_iseg": ("iseg", "beta_i"), "DICE_iseg": ("iseg", "gamma_i"),
    "VLC_imgtextr": ("imgtextr", "theta"), "IC_intr": ("intr", "phi"),
    "CE_intg": ("intg", "alpha_ig"), "DICE_intg": ("intg", "beta_ig"), "ICE_intg": ("intg", "gamma_ig"),
}
TASK_KEYS = ("pano", "grd", "iseg", "imgtextr", "intr", "intg")
NOOBJ_WEIGHT = 0.1


@dataclass
class SegTarget:
    """Ground truth of one mask-producing example: one row per target."""
    masks: np.ndarray                       # [n_t x HW] bool
    categories: Sequence | None = None      # panoptic only


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def grounding_terms(out, gt: SegTarget) -> dict:
    """Per-target query selection: column t of ``scores`` ranks object queries for target t."""
    g = np.asarray(gt.masks, dtype=np.float64)
    n_obj, n_t = out.scores.shape
    if g.shape[0] != n_t:
        raise LossError(f"{n_t} score columns vs {g.shape[0]} target masks")
    if n_t > n_obj:
        raise LossError(f"{n_t} targets but only {n_obj} object queries")
    prob = _softmax(out.scores.data, axis=0)
    m = hungarian_match(match_cost(out.mask_logits.data, g, prob))
    g2p = m.gt_to_pred()
    obj = np.array([g2p[t] for t in range(n_t)], dtype=np.int64)
    logits = out.mask_logits[obj]
    return {"CE": ce_class_loss(transpose(out.scores), obj),
            "BCE": bce_mask_loss(logits, g),
            "DICE": dice_loss(logits, g)}


def panoptic_terms(out, gt: SegTarget) -> dict:
    g = np.asarray(gt.masks, dtype=np.float64)
    cats = np.asarray(gt.categories, dtype=np.int64)
    n_obj, c1 = out.scores.shape
    noobj = c1 - 1
    prob = _softmax(out.scores.data, axis=1)
    m = hungarian_match(match_cost(out.mask_logits.data, g, prob[:, cats]))
    labels = np.full(n_obj, noobj, dtype=np.int64)
    for p, t in m.pairs:
        labels[p] = cats[t]
    cw = np.ones(c1)
    cw[noobj] = NOOBJ_WEIGHT
    terms = {"CE": ce_class_loss(out.scores, labels, cw)}
    if m.pairs:
        pi = np.array([p for p, _ in m.pairs], dtype=np.int64)
        ti = np.array([t for _, t in m.pairs], dtype=np.int64)
        logits = out.mask_logits[pi]
        terms["BCE"] = bce_mask_loss(logits, g[ti])
        terms["DICE"] = dice_loss(logits, g[ti])
    else:
        zero = Tensor._wrap(np.zeros(()))
        terms["BCE"] = terms["DICE"] = zero
    return terms


def _task_terms(key, outputs, targets) -> dict:
    outs = _as_list(outputs)
    if key in ("imgtextr", "intr"):
        vals = [contrastive_loss(o) for o in outs]
        name = "VLC_imgtextr" if key == "imgtextr" else "IC_intr"
        return {name: _avg(vals)}
    tgts = _as_list(targets)
    if len(tgts) != len(outs):
        raise LossError(f"{key}: {len(outs)} outputs vs {len(tgts)} targets")
    fn = panoptic_terms if key == "pano" else grounding_terms
    per = [fn(o, t) for o, t in zip(outs, tgts)]
    out = {}
    for base in ("CE", "BCE", "DICE"):
        v = _avg([p[base] for p in per])
        if key == "intg":
            # interleave grounding names its mask terms DICE and ICE (pixel-wise CE)
            out[{"CE": "CE_intg", "DICE": "DICE_intg", "BCE": "ICE_intg"}[base]] = v
        else:
            out[f"{base}_{key}"] = v
    return out


def _avg(vals):
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total * (1.0 / len(vals)) if len(vals) > 1 else total


@dataclass
class LossReport:
    total: Tensor
    terms: dict = field(default_factory=dict)     # name -> unweighted float

    def as_dict(self) -> dict:
        d = {"total": float(self.total.data)}
        d.update(self.terms)
        return d


def combined_loss(task_outputs: Mapping, ground_truth: Mapping, w: LossWeights | None = None) -> LossReport:
    """Weighted sum over tasks present in ``task_outputs``.

    ``task_outputs[key]`` is a segmentation output (``scores`` and
    ``mask_logits``) or a square retrieval score matrix, or a list of them
    (averaged).  ``ground_truth[key]`` holds the matching :class:`SegTarget`
    (or list); retrieval tasks need none.
    """
    w = (w or LossWeights()).validate()
    wd = w.as_dict()
    for key in task_outputs:
        if key not in TASK_KEYS:
            raise LossError(f"unknown task key {key!r}")
    require_outputs(task_outputs, w)
    total = None
    report = {}
    for key in TASK_KEYS:
        active = any(wd[wn] > 0 for (k, wn) in TERMS.values() if k == key)
        if key not in task_outputs:
            continue
        if key not in ("imgtextr", "intr") and key not in ground_truth:
            if active:
                raise LossError(f"missing ground truth for active task {key!r}")
            continue
        terms = _task_terms(key, task_outputs[key], ground_truth.get(key))
        for name, val in terms.items():
            report[name] = float(val.data)
            weight = wd[TERMS[name][1]]
            if weight > 0:
                total = val * weight if total is None else total + val * weight
    if total is None:
        raise LossError("no active loss term has outputs")
    return LossReport(total, report)


def require_outputs(task_outputs: Mapping, w: LossWeights) -> None:
    """Raise if an active (positive-weight) term has no outputs."""
    wd = w.as_dict()
    for name, (key, wname) in TERMS.items():
        if wd[wname] > 0 and key not in task_outputs:
            raise LossError(f"missing output {key!r} for active term {name}")
