"""Segmentation evaluation metrics: Dice/IoU, structure measure, weighted
F-measure, mean enhanced-alignment measure, PR/F curves, and the per-scale
bucket report.

All functions take a prediction map P in [0,1] and a binary ground truth G
as 2-D numpy arrays (leading singleton channel axes are squeezed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_EPS = 1e-8

CURVE_THRESHOLDS = np.arange(256) / 255.0
CURVE_F_BETA_SQ = 0.3      # curve F-measure convention
WEIGHTED_F_BETA_SQ = 1.0   # weighted F-measure convention
DEFAULT_BINARIZE_THRESHOLD = 0.5


class EmptyGroundTruthError(ValueError):
    """Raised where a metric is undefined for an empty ground truth."""


def _prep(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    while p.ndim > 2 and p.shape[0] == 1:
        p = p[0]
    while g.ndim > 2 and g.shape[0] == 1:
        g = g[0]
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary")
    return p, g.astype(bool)


def dice_iou(pred, gt, threshold=DEFAULT_BINARIZE_THRESHOLD):
    """Dice and IoU of the thresholded prediction; (1,1) when both empty."""
    p, g = _prep(pred, gt)
    b = p >= threshold
    inter = float(np.logical_and(b, g).sum())
    nb, ng = float(b.sum()), float(g.sum())
    union = nb + ng - inter
    dice = 1.0 if (nb + ng) == 0 else 2.0 * inter / (nb + ng)
    iou = 1.0 if union == 0 else inter / union
    return dice, iou


# -- structure measure -------------------------------------------------------


def _s_object_part(pred, region):
    if not region.any():
        return 0.0
    x = pred[region].mean()
    sigma = pred[region].std()
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _ssim_block(pred, gt):
    n = pred.size
    if n == 0:
        return 1.0
    if n == 1:
        return 1.0 if float(pred.reshape(())) == float(gt.reshape(())) else 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1)
    sy = ((gt - y) ** 2).sum() / (n - 1)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _gt_centroid(gt):
    rows, cols = np.nonzero(gt)
    return int(np.round(rows.mean())) + 1, int(np.round(cols.mean())) + 1


def _s_region(pred, gt):
    h, w = gt.shape
    cy, cx = _gt_centroid(gt)
    area = h * w
    # area-proportional quadrant weights about the foreground centroid
    w1 = (cy * cx) / area
    w2 = (cy * (w - cx)) / area
    w3 = ((h - cy) * cx) / area
    w4 = 1.0 - w1 - w2 - w3
    q1 = _ssim_block(pred[:cy, :cx], gt[:cy, :cx].astype(np.float64))
    q2 = _ssim_block(pred[:cy, cx:], gt[:cy, cx:].astype(np.float64))
    q3 = _ssim_block(pred[cy:, :cx], gt[cy:, :cx].astype(np.float64))
    q4 = _ssim_block(pred[cy:, cx:], gt[cy:, cx:].astype(np.float64))
    return w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: alpha * object similarity + (1-alpha) * region
    similarity; mean-based fallback for all-background / all-foreground G."""
    p, g = _prep(pred, gt)
    y = g.mean()
    if y == 0:
        return float(np.clip(1.0 - p.mean(), 0.0, 1.0))
    if y == 1:
        return float(np.clip(p.mean(), 0.0, 1.0))
    o_fg = _s_object_part(p, g)
    o_bg = _s_object_part(1.0 - p, ~g)
    s_obj = y * o_fg + (1.0 - y) * o_bg
    s_reg = _s_region(p, g)
    return float(np.clip(alpha * s_obj + (1.0 - alpha) * s_reg, 0.0, 1.0))


# -- weighted F-measure ------------------------------------------------------


def _gauss_kernel(size=7, sigma=5.0):
    half = size // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def weighted_fmeasure(pred, gt, beta_sq=WEIGHTED_F_BETA_SQ):
    """Weighted F-measure with distance-aware error weighting.

    False positives far from the object are discounted via an exponential
    penalty on the distance transform; errors inside the background borrow
    the error of their nearest foreground pixel before Gaussian smoothing.
    """
    p, g = _prep(pred, gt)
    if not g.any():
        raise EmptyGroundTruthError("weighted F-measure undefined for empty G")
    dst, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    err = np.abs(p - g)
    err_t = err.copy()
    err_t[~g] = err[idx[0][~g], idx[1][~g]]
    # replicate borders: a constant error field must be a smoothing fixed
    # point, so an all-wrong prediction gets weighted recall exactly 0
    smoothed = ndimage.correlate(err_t, _gauss_kernel(), mode="nearest")
    min_err = np.where(g & (smoothed < err), smoothed, err)
    weight = np.ones_like(p)
    weight[~g] = 2.0 - np.exp(np.log(0.5) / 5.0 * dst[~g])
    ew = min_err * weight
    tp_w = g.sum() - ew[g].sum()
    fp_w = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tp_w / (tp_w + fp_w + _EPS)
    f = ((1.0 + beta_sq) * precision * recall /
         (beta_sq * precision + recall + _EPS))
    return float(np.clip(f, 0.0, 1.0))


# -- enhanced-alignment measure ----------------------------------------------


def _e_measure_binary(bin_pred, gt):
    h, w = gt.shape
    if not gt.any():
        enhanced = 1.0 - bin_pred
    elif gt.all():
        enhanced = bin_pred.astype(np.float64)
    else:
        fm = bin_pred - bin_pred.mean()
        gm = gt - gt.mean()
        align = 2.0 * gm * fm / (gm * gm + fm * fm + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum() / (h * w - 1 + _EPS))


def e_measure_mean(pred, gt):
    """Mean over 256 binarization thresholds of the enhanced-alignment
    measure (strict > binarization, so an exact binary map only misses the
    top threshold)."""
    p, g = _prep(pred, gt)
    gf = g.astype(np.float64)
    scores = []
    for tau in CURVE_THRESHOLDS:
        scores.append(_e_measure_binary((p > tau).astype(np.float64), gf))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


# -- curves ------------------------------------------------------------------


@dataclass
class CurveSet:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray
    f_beta_sq: float = CURVE_F_BETA_SQ


def pr_curves(samples, f_beta_sq=CURVE_F_BETA_SQ):
    """Dataset-mean precision/recall over 256 thresholds; F from the means.

    Precision of an empty prediction is defined as 1 (0/0 guard).
    """
    if not samples:
        raise ValueError("pr_curves: empty sample list")
    n_thr = CURVE_THRESHOLDS.size
    precisions = np.zeros(n_thr)
    recalls = np.zeros(n_thr)
    for pred, gt in samples:
        p, g = _prep(pred, gt)
        ng = float(g.sum())
        for i, tau in enumerate(CURVE_THRESHOLDS):
            b = p >= tau
            nb = float(b.sum())
            tp = float(np.logical_and(b, g).sum())
            precisions[i] += 1.0 if nb == 0 else tp / nb
            recalls[i] += 1.0 if ng == 0 else tp / ng
    precisions /= len(samples)
    recalls /= len(samples)
    f = ((1.0 + f_beta_sq) * precisions * recalls /
         np.maximum(f_beta_sq * precisions + recalls, _EPS))
    return CurveSet(CURVE_THRESHOLDS.copy(), precisions, recalls, f, f_beta_sq)


# -- report ------------------------------------------------------------------


@dataclass
class ImageRecord:
    id: str
    dice: float
    iou: float
    s_alpha: float
    f_w: float
    e_mean: float
    scale_ratio: float
    bucket: str


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    threshold: float = DEFAULT_BINARIZE_THRESHOLD

    def aggregate(self):
        if not self.records:
            return {}
        return {
            "mDice": float(np.mean([r.dice for r in self.records])),
            "mIoU": float(np.mean([r.iou for r in self.records])),
            "S_alpha": float(np.mean([r.s_alpha for r in self.records])),
            "F_w": float(np.mean([r.f_w for r in self.records])),
            "E_mean": float(np.mean([r.e_mean for r in self.records])),
            "count": len(self.records),
        }

    def bucket_report(self):
        return scale_bucket_report(self.records)


def evaluate_pair(pred, gt, sample_id="", threshold=DEFAULT_BINARIZE_THRESHOLD,
                  scale_info=None):
    """All five metrics for one (prediction, ground truth) pair."""
    from .pipeline import polyp_scale_ratio

    p, g = _prep(pred, gt)
    dice, iou = dice_iou(p, g, threshold)
    s = s_measure(p, g)
    try:
        fw = weighted_fmeasure(p, g)
    except EmptyGroundTruthError:
        fw = float("nan")
    em = e_measure_mean(p, g)
    if scale_info is None:
        scale_info = polyp_scale_ratio(g.astype(np.float64))
    ratio, bucket = scale_info
    return ImageRecord(sample_id, dice, iou, s, fw, em, ratio, bucket)


def scale_bucket_report(records):
    """Mean dice/iou/s_alpha and population share per scale bucket."""
    out = {}
    total = len(records)
    for bucket in ("small", "medium", "large"):
        rs = [r for r in records if r.bucket == bucket]
        if rs:
            out[bucket] = {
                "count": len(rs),
                "share": len(rs) / total if total else 0.0,
                "mDice": float(np.mean([r.dice for r in rs])),
                "mIoU": float(np.mean([r.iou for r in rs])),
                "S_alpha": float(np.mean([r.s_alpha for r in rs])),
            }
        else:
            out[bucket] = {"count": 0, "share": 0.0,
                           "mDice": None, "mIoU": None, "S_alpha": None}
    return out


# -- serialization -----------------------------------------------------------


def write_report_tsv(path, report: MetricReport):
    agg = report.aggregate()
    with open(path, "w", encoding="utf-8") as f:
        f.write("# binarization_threshold\t%g\n" % report.threshold)
        f.write("# empty_prediction_precision\t1\n")
        f.write("id\tdice\tiou\ts_alpha\tf_w\te_mean\tscale_ratio\tbucket\n")
        for r in report.records:
            f.write(f"{r.id}\t{r.dice:.6f}\t{r.iou:.6f}\t{r.s_alpha:.6f}\t"
                    f"{r.f_w:.6f}\t{r.e_mean:.6f}\t{r.scale_ratio:.6f}\t"
                    f"{r.bucket}\n")
        if agg:
            f.write(f"AGGREGATE\t{agg['mDice']:.6f}\t{agg['mIoU']:.6f}\t"
                    f"{agg['S_alpha']:.6f}\t{agg['F_w']:.6f}\t"
                    f"{agg['E_mean']:.6f}\t-\t-\n")


def write_curves_tsv(path, curves: CurveSet):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# f_beta_sq\t%g\n" % curves.f_beta_sq)
        f.write("threshold\tprecision\trecall\tfmeasure\n")
        for t, p, r, fm in zip(curves.thresholds, curves.precision,
                               curves.recall, curves.fmeasure):
            f.write(f"{t:.6f}\t{p:.6f}\t{r:.6f}\t{fm:.6f}\n")


def write_bucket_tsv(path, buckets):
    with open(path, "w", encoding="utf-8") as f:
        f.write("bucket\tcount\tshare\tmDice\tmIoU\tS_alpha\n")
        for name, row in buckets.items():
            def fmt(v):
                return "-" if v is None else f"{v:.6f}"
            f.write(f"{name}\t{row['count']}\t{row['share']:.6f}\t"
                    f"{fmt(row['mDice'])}\t{fmt(row['mIoU'])}\t"
                    f"{fmt(row['S_alpha'])}\n")
