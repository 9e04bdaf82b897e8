"""Saliency / camouflage evaluation metrics.

Variants fixed here: F_max with beta^2 = 0.3 over 256 thresholds; S-measure
with alpha = 0.5 (sample std in the object term, unbiased region ssim);
E-measure from the alignment matrix of mean-centered maps, averaged over all
pixels (so a perfect prediction scores exactly 1); weighted F-measure with
the 7x7 sigma=5 Gaussian dependency weighting and beta^2 = 1.  Ground truth
is binarized at byte > 127; predictions at probability > 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError

FMAX_BETA_SQ = 0.3
GT_THRESHOLD = 127.0 / 255.0
PRED_THRESHOLD = 0.5
_EPS = 1e-8

METRIC_COLUMNS = (
    "f_max", "iou", "acc", "mae", "s_measure", "e_measure", "weighted_f"
)


@dataclass
class MetricReport:
    f_max: float
    iou: float
    acc: float
    mae: float
    s_measure: float
    e_measure: float
    weighted_f: float

    def as_row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")


def binarize_pred(pred: np.ndarray) -> np.ndarray:
    return pred > PRED_THRESHOLD


def binarize_gt(gt_values: np.ndarray) -> np.ndarray:
    """gt stored as [0,1] grayscale; foreground is byte > 127."""
    return gt_values > GT_THRESHOLD


def f_max(pred: np.ndarray, gt: np.ndarray) -> float:
    """Max F_beta (beta^2=0.3) over thresholds k/255, k = 0..255 (pred >= t)."""
    _check_shapes(pred, gt)
    gt = gt.astype(bool)
    n_gt = int(gt.sum())
    p = pred.reshape(-1)
    g = gt.reshape(-1)
    best = 0.0
    for k in range(256):
        positive = p >= (k / 255.0)
        n_pos = int(positive.sum())
        if n_gt == 0:
            f = 1.0 if n_pos == 0 else 0.0
        else:
            tp = int(np.count_nonzero(positive & g))
            prec = 1.0 if n_pos == 0 else tp / n_pos
            rec = tp / n_gt
            denom = FMAX_BETA_SQ * prec + rec
            f = 0.0 if denom == 0.0 else (1.0 + FMAX_BETA_SQ) * prec * rec / denom
        best = max(best, f)
    return best


def iou(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    _check_shapes(pred_bin, gt)
    p, g = pred_bin.astype(bool), gt.astype(bool)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def accuracy(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    _check_shapes(pred_bin, gt)
    return float(np.mean(pred_bin.astype(bool) == gt.astype(bool)))


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    _check_shapes(pred, gt)
    return float(np.mean(np.abs(pred - gt.astype(np.float64))))


def _s_object_term(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = float(x.mean())
    sigma = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + 2.0 * sigma + _EPS)


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 1.0
    xm, ym = float(p.mean()), float(g.mean())
    if n == 1:
        sx = sy = sxy = 0.0
    else:
        sx = float(((p - xm) ** 2).sum() / (n - 1))
        sy = float(((g - ym) ** 2).sum() / (n - 1))
        sxy = float(((p - xm) * (g - ym)).sum() / (n - 1))
    a = 4.0 * xm * ym * sxy
    b = (xm * xm + ym * ym) * (sx + sy)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def _gt_centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    if rows.size == 0:
        return h // 2, w // 2
    cy = int(np.round(rows.mean()))
    cx = int(np.round(cols.mean()))
    # keep all four regions nonempty
    cy = min(max(cy, 0), h - 2) + 1
    cx = min(max(cx, 0), w - 2) + 1
    return cy, cx


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha-blend of object- and region-aware terms."""
    _check_shapes(pred, gt)
    g = gt.astype(bool)
    p = pred.astype(np.float64)
    mu = float(g.mean())
    if mu == 0.0:  # no foreground: score the absence of prediction
        return 1.0 - float(p.mean())
    if mu == 1.0:
        return float(p.mean())

    s_obj = mu * _s_object_term(p[g]) + (1.0 - mu) * _s_object_term(1.0 - p[~g])

    cy, cx = _gt_centroid(g)
    total = g.size
    s_reg = 0.0
    for rs, cs in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, None)),
        (slice(cy, None), slice(0, cx)),
        (slice(cy, None), slice(cx, None)),
    ):
        gq = g[rs, cs]
        weight = gq.size / total
        s_reg += weight * _region_ssim(p[rs, cs].reshape(-1),
                                       gq.astype(np.float64).reshape(-1))
    return max(alpha * s_obj + (1.0 - alpha) * s_reg, 0.0)


def e_measure(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced alignment measure on the binarized prediction."""
    _check_shapes(pred_bin, gt)
    g = gt.astype(np.float64)
    p = pred_bin.astype(np.float64)
    if g.sum() == 0.0:
        enhanced = 1.0 - p
    elif g.sum() == g.size:
        enhanced = p
    else:
        phi_g = g - g.mean()
        phi_p = p - p.mean()
        align = 2.0 * phi_g * phi_p / (phi_g**2 + phi_p**2 + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(np.clip(enhanced.mean(), 0.0, 1.0))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = size // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_f(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dependency-weighted F-measure (beta^2 = 1, 7x7 sigma=5 weighting)."""
    _check_shapes(pred, gt)
    g = gt.astype(bool)
    p = np.clip(pred.astype(np.float64), 0.0, 1.0)
    if not g.any():
        return 1.0 if p.sum() == 0.0 else 0.0

    err = np.abs(p - g.astype(np.float64))
    dst, (ir, ic) = ndimage.distance_transform_edt(~g, return_indices=True)
    err_t = err.copy()
    bg = ~g
    err_t[bg] = err[ir[bg], ic[bg]]
    ea = ndimage.convolve(err_t, _gaussian_kernel(), mode="constant", cval=0.0)
    min_e = err.copy()
    sel = g & (ea < err)
    min_e[sel] = ea[sel]
    b = np.where(bg, 2.0 - np.exp(np.log(0.5) / 5.0 * dst), 1.0)
    ew = min_e * b

    n_fg = float(g.sum())
    tpw = max(n_fg - float(ew[g].sum()), 0.0)
    fpw = float(ew[bg].sum())
    recall = tpw / n_fg
    precision = tpw / (tpw + fpw + _EPS)
    q = 2.0 * recall * precision / (recall + precision + _EPS)
    return float(np.clip(q, 0.0, 1.0))


def evaluate_pair(pred: np.ndarray, gt_values: np.ndarray) -> MetricReport:
    """All metrics for one (probability map, grayscale gt) pair."""
    _check_shapes(pred, gt_values)
    gt = binarize_gt(gt_values)
    pred_bin = binarize_pred(pred)
    return MetricReport(
        f_max=f_max(pred, gt),
        iou=iou(pred_bin, gt),
        acc=accuracy(pred_bin, gt),
        mae=mae(pred, gt),
        s_measure=s_measure(pred, gt),
        e_measure=e_measure(pred_bin, gt),
        weighted_f=weighted_f(pred, gt),
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValidationError("cannot average an empty report list")
    # sequential sum in list order for bit-reproducibility
    sums = [0.0] * len(METRIC_COLUMNS)
    for r in reports:
        for i, v in enumerate(r.as_row()):
            sums[i] += v
    n = len(reports)
    return MetricReport(*[s / n for s in sums])
