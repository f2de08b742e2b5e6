"""Saliency evaluation metrics.

All functions take a grayscale prediction in [0, 1] and a strictly binary
mask of the same 2-d shape, and are pure: repeated evaluation is
bit-identical.  Where reference formulations add a tiny epsilon to
denominators, this module branches on exact zero instead, so
perfect-prediction fixed points (mae 0, fnr 0, wfm 1, sm 1) hold exactly.

Threshold sweeps binarize at P > t/255 for t in 0..255; the fixed-threshold
binarization used by the false-negative ratio is P >= threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edt import euclidean_dt, nearest_fg_mean

N_THRESHOLDS = 256


def _validate(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 2 or gt.ndim != 2:
        raise ValueError(
            f"metrics expect 2-d maps, got {pred.shape} and {gt.shape}"
        )
    if pred.shape != gt.shape:
        raise ValueError(
            f"prediction shape {pred.shape} != ground-truth shape {gt.shape}"
        )
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValueError("prediction values must lie in [0, 1]")
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ValueError("ground truth must be strictly binary (0/1)")
    return pred, gt


@dataclass
class EvalPair:
    """Validated (prediction, mask) pair for per-image evaluation."""

    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.pred, self.gt = _validate(self.pred, self.gt)


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute pixel-wise difference."""
    pred, gt = _validate(pred, gt)
    return float(np.abs(pred - gt).mean())


def fnr(pred: np.ndarray, gt: np.ndarray, bin_threshold: float = 0.5) -> float:
    """False negative ratio: missed foreground over total foreground.

    The prediction is binarized at ``bin_threshold`` (>=); a pixel counts
    as a false negative when the mask is 1 and the binarized prediction
    is 0.  Raises on an empty mask -- the ratio is undefined there, and
    silently reporting 0 would hide the degenerate image.
    """
    pred, gt = _validate(pred, gt)
    n_fg = gt.sum()
    if n_fg == 0:
        raise ValueError("FNR is undefined for an empty ground-truth mask")
    pbin = pred >= bin_threshold
    fn = np.logical_and(gt == 1.0, ~pbin).sum()
    return float(fn / n_fg)


# -- weighted F-measure ----------------------------------------------------


def _gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def _correlate_zero_pad(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.einsum("xyij,ij->xy", windows, kernel)


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, beta2: float = 1.0) -> float:
    """F-measure over distance-weighted errors.

    The error map |P - G| is made boundary-aware: outside the mask each
    pixel first inherits the mean error over its nearest foreground pixels
    (ties averaged, keeping the measure exactly symmetric under
    transposition), the result is smoothed with a 7x7 sigma-5 Gaussian,
    and inside the mask the smoothed value replaces the raw error where it
    is smaller (dependency correction).  Errors outside the mask are then
    scaled by the importance weight min(1, exp(ln(0.5)/5 * d)) for
    distance d to the mask.  Weighted precision/recall combine with
    ``beta2``.  An empty mask returns 0.0 (callers flag the image).
    """
    pred, gt = _validate(pred, gt)
    fg = gt == 1.0
    if not fg.any():
        return 0.0
    bg = ~fg

    err = np.abs(pred - gt)
    dist2, _, _ = euclidean_dt(fg)
    err_filled = nearest_fg_mean(err, fg)
    smoothed = _correlate_zero_pad(err_filled, _gauss_kernel())
    err_dep = np.where(fg & (smoothed < err), smoothed, err)

    importance = np.ones_like(err)
    dist = np.sqrt(dist2[bg].astype(np.float64))
    importance[bg] = np.minimum(1.0, np.exp(np.log(0.5) / 5.0 * dist))
    weighted = err_dep * importance

    n_fg = gt.sum()
    tpw = n_fg - weighted[fg].sum()
    fpw = weighted[bg].sum()
    recall = 1.0 - weighted[fg].mean()
    precision = tpw / (tpw + fpw) if (tpw + fpw) > 0 else 0.0
    denom = beta2 * precision + recall
    if denom <= 0:
        return 0.0
    return float((1.0 + beta2) * precision * recall / denom)


# -- S-measure ----------------------------------------------------------------


def _object_score(vals: np.ndarray) -> float:
    """2x / (x^2 + 1 + sigma_x) over the masked values."""
    x = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = gt == 1.0
    u = gt.mean()
    o_fg = _object_score(pred[fg]) if fg.any() else 0.0
    o_bg = _object_score((1.0 - pred)[~fg]) if (~fg).any() else 0.0
    return u * o_fg + (1.0 - u) * o_bg


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """Mask centroid as 1-based cut counts (rows, cols), .5 rounding up."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_up(h / 2.0), _round_half_up(w / 2.0)
    rows1 = np.arange(1, h + 1, dtype=np.float64)
    cols1 = np.arange(1, w + 1, dtype=np.float64)
    y = _round_half_up(float((gt.sum(axis=1) * rows1).sum() / total))
    x = _round_half_up(float((gt.sum(axis=0) * cols1).sum() / total))
    return y, x


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x = p.mean()
    y = g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if beta > 0:
        return float(alpha / beta)
    return 1.0 if alpha == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    yc, xc = _centroid(gt)
    area = float(h * w)
    score = 0.0
    for rs, cs, wt in (
        (slice(0, yc), slice(0, xc), yc * xc / area),
        (slice(0, yc), slice(xc, w), yc * (w - xc) / area),
        (slice(yc, h), slice(0, xc), (h - yc) * xc / area),
        (slice(yc, h), slice(xc, w), (h - yc) * (w - xc) / area),
    ):
        if wt == 0.0:
            continue
        score += wt * _region_ssim(pred[rs, cs], gt[rs, cs])
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray, m: float = 0.5) -> float:
    """Structural similarity: m * object-aware + (1-m) * region-aware.

    Degenerate masks use the reference rules: an all-zero mask scores
    1 - mean(P), an all-one mask scores mean(P).
    """
    pred, gt = _validate(pred, gt)
    y = gt.mean()
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())
    score = m * _s_object(pred, gt) + (1.0 - m) * _s_region(pred, gt)
    return float(max(score, 0.0))


# -- E-measure -----------------------------------------------------------------


def _threshold_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(positives, true positives) for P > t/255 at every t in 0..255."""
    thresholds = np.arange(N_THRESHOLDS, dtype=np.float64) / 255.0
    all_sorted = np.sort(pred, axis=None)
    fg_sorted = np.sort(pred[gt == 1.0], axis=None)
    pos = pred.size - np.searchsorted(all_sorted, thresholds, side="right")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="right")
    return pos.astype(np.float64), tp.astype(np.float64)


def _enhanced_value(dfm: float, dgt: float) -> float:
    denom = dgt * dgt + dfm * dfm
    align = 2.0 * dgt * dfm / denom if denom > 0 else 0.0
    return (align + 1.0) ** 2 / 4.0


def e_measure_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean enhanced-alignment score over the 256-threshold sweep.

    Per threshold both maps are mean-centered; the alignment
    2*a*b/(a^2+b^2) is enhanced by theta = (align+1)^2/4 and averaged over
    pixels.  Since both maps are binary at that point, the pixel average
    collapses onto the 2x2 contingency counts, which is what is computed.
    Degenerate masks follow the reference rules (all-zero: mean of 1-FM,
    all-one: mean of FM).
    """
    pred, gt = _validate(pred, gt)
    n = float(pred.size)
    n_fg = float(gt.sum())
    pos, tp = _threshold_counts(pred, gt)

    if n_fg == 0.0:
        return float(np.mean((n - pos) / n))
    if n_fg == n:
        return float(np.mean(pos / n))

    mu_gt = n_fg / n
    scores = np.empty(N_THRESHOLDS)
    for t in range(N_THRESHOLDS):
        p = pos[t]
        tp_t = tp[t]
        fp = p - tp_t
        fn = n_fg - tp_t
        tn = n - p - fn
        mu_fm = p / n
        a1, a0 = 1.0 - mu_fm, -mu_fm  # centered FM value at FM=1 / FM=0
        b1, b0 = 1.0 - mu_gt, -mu_gt
        total = (
            tp_t * _enhanced_value(a1, b1)
            + fp * _enhanced_value(a1, b0)
            + fn * _enhanced_value(a0, b1)
            + tn * _enhanced_value(a0, b0)
        )
        scores[t] = total / n
    return float(scores.mean())


# -- PR / F curves ----------------------------------------------------------------


def pr_and_f_curves(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3) -> dict[str, np.ndarray]:
    """Precision/recall/F arrays over the 256-threshold sweep.

    Zero denominators (no positives, empty mask, P and R both zero) yield
    0 for the affected entry.
    """
    pred, gt = _validate(pred, gt)
    pos, tp = _threshold_counts(pred, gt)
    n_fg = float(gt.sum())
    precision = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    recall = (
        tp / n_fg if n_fg > 0 else np.zeros_like(tp)
    )
    denom = beta2 * precision + recall
    fmeasure = np.divide(
        (1.0 + beta2) * precision * recall,
        denom,
        out=np.zeros_like(denom),
        where=denom > 0,
    )
    return {
        "threshold": np.arange(N_THRESHOLDS, dtype=np.float64),
        "precision": precision,
        "recall": recall,
        "fmeasure": fmeasure,
    }


# -- per-image bundle ---------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-image rows, their arithmetic means, and optional mean curves."""

    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    curves: dict[str, np.ndarray] | None = None


def evaluate_pair(
    pred: np.ndarray,
    gt: np.ndarray,
    fnr_threshold: float = 0.5,
    with_curves: bool = False,
) -> dict:
    """All per-image metrics; FNR is None (flagged) on an empty mask."""
    pair = EvalPair(pred, gt)
    empty_gt = pair.gt.sum() == 0
    row = {
        "mae": mae(pair.pred, pair.gt),
        "wfm": weighted_fmeasure(pair.pred, pair.gt),
        "sm": s_measure(pair.pred, pair.gt),
        "em_mean": e_measure_mean(pair.pred, pair.gt),
        "fnr": None if empty_gt else fnr(pair.pred, pair.gt, fnr_threshold),
        "empty_gt": bool(empty_gt),
    }
    if with_curves:
        row["curves"] = pr_and_f_curves(pair.pred, pair.gt)
    return row
