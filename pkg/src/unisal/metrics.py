"""Saliency evaluation metrics on plain numpy arrays.

Location-based metrics (auc_judd, s_auc, nss, info_gain) take a boolean
fixation map alongside the predicted map; distribution-based metrics
(sim, kld, info_gain) renormalize their inputs to sum to one.

auc_judd builds the ROC from thresholds at every distinct saliency value,
which makes its trapezoidal area exactly the pairwise rank statistic with
ties counted one half.
"""

from __future__ import annotations

import numpy as np

from . import tensor as te


def _check_fix(pred, fix):
    fix = np.asarray(fix, dtype=bool)
    if fix.shape != pred.shape:
        raise ValueError(f"fixation map shape {fix.shape} != pred {pred.shape}")
    if not fix.any():
        raise ValueError("at least one fixation is required")
    return fix


def _to_distribution(m, name):
    m = np.asarray(m, dtype=np.float64)
    if (m < 0).any():
        raise ValueError(f"{name} must be nonnegative")
    total = m.sum()
    if total <= 0:
        raise ValueError(f"{name} has no mass")
    return m / total


def _auc_from_values(pos, neg):
    """Trapezoidal ROC area with thresholds at every distinct value."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tpr = (len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")) / len(pos)
    fpr = (len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")) / len(neg)
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    return float(np.trapezoid(tpr, fpr))


def auc_judd(pred, fix):
    """AUC over fixated vs non-fixated pixels.

    :param pred: saliency map (h, w)
    :param fix: boolean fixation map, same shape, at least one True
    """
    pred = np.asarray(pred, dtype=np.float64)
    fix = _check_fix(pred, fix)
    neg = pred[~fix]
    if neg.size == 0:
        raise ValueError("every pixel is fixated; AUC is undefined")
    return _auc_from_values(pred[fix], neg)


def s_auc(pred, fix, other_fixations, n_splits=10, seed=0):
    """Shuffled AUC: negatives drawn from other samples' fixation locations.

    Each split samples, without replacement, as many negative locations as
    there are fixations (fewer if the pool is smaller); locations fixated in
    the current map are excluded from the pool.  Deterministic given seed.

    :param other_fixations: iterable of boolean fixation maps from other samples
    """
    pred = np.asarray(pred, dtype=np.float64)
    fix = _check_fix(pred, fix)
    pool = np.zeros_like(fix)
    for om in other_fixations:
        om = np.asarray(om, dtype=bool)
        if om.shape != pred.shape:
            raise ValueError("other fixation maps must match pred shape")
        pool |= om
    pool &= ~fix
    coords = np.flatnonzero(pool)
    if coords.size == 0:
        raise ValueError("no usable negative locations from other samples")
    pos = pred[fix]
    take = min(len(pos), coords.size)
    rng = np.random.default_rng(seed)
    flat = pred.ravel()
    scores = []
    for _ in range(n_splits):
        chosen = rng.choice(coords, size=take, replace=False)
        scores.append(_auc_from_values(pos, flat[chosen]))
    return float(np.mean(scores))


def nss(pred, fix):
    """Mean z-scored saliency at fixations (population std); 0 on a
    constant map."""
    pred = np.asarray(pred, dtype=np.float64)
    fix = _check_fix(pred, fix)
    std = pred.std()
    if std == 0.0:
        return 0.0
    z = (pred - pred.mean()) / std
    return float(z[fix].mean())


def cc(pred, gt):
    """Pearson correlation between two maps; both need nonzero variance."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    sp, sg = pred.std(), gt.std()
    if sp == 0.0 or sg == 0.0:
        raise ValueError("cc undefined on a constant map")
    cov = ((pred - pred.mean()) * (gt - gt.mean())).mean()
    return float(cov / (sp * sg))


def sim(pred, gt):
    """Histogram intersection of the sum-normalized maps; 1 iff identical
    up to scale."""
    p = _to_distribution(pred, "pred")
    q = _to_distribution(gt, "gt")
    return float(np.minimum(p, q).sum())


def kld(pred, gt, eps=1e-7, reverse=False):
    """KL divergence of the normalized maps, natural log.

    Default direction sums gt * log(gt / (pred + eps)), penalizing predicted
    mass missing where the target has mass; reverse=True swaps the roles.
    """
    p = _to_distribution(pred, "pred")
    q = _to_distribution(gt, "gt")
    if reverse:
        p, q = q, p
    terms = np.where(q > 0, q * (np.log(np.maximum(q, 1e-300)) - np.log(p + eps)), 0.0)
    return float(terms.sum())


def info_gain(pred, baseline, fix, eps=1e-7):
    """Information gain (bits) of pred over a baseline map, averaged over
    fixations."""
    p = _to_distribution(pred, "pred")
    b = _to_distribution(baseline, "baseline")
    fix = _check_fix(p, fix)
    return float((np.log2(p[fix] + eps) - np.log2(b[fix] + eps)).mean())


def bilinear_resize(m, hw):
    """Resize a 2D map with half-pixel-center linear interpolation."""
    m = np.asarray(m, dtype=np.float64)
    h, w = hw
    ah = te.resize_matrix(m.shape[0], h)
    aw = te.resize_matrix(m.shape[1], w)
    return ah @ m @ aw.T


def sharpness(m, target_hw=None):
    """Peak gradient magnitude, optionally after resizing to target_hw;
    central differences with unit spacing."""
    m = np.asarray(m, dtype=np.float64)
    if target_hw is not None:
        m = bilinear_resize(m, target_hw)
    gy, gx = np.gradient(m)
    return float(np.sqrt(gx ** 2 + gy ** 2).max())
