"""Image-reconstruction metrics and the per-sample evaluation report.

All five metrics are errors (lower is better). Images are 2D arrays in
``[0, 1]``; a trailing channel axis of size 1 is accepted and dropped.
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

HIST_BINS = 50
TIE_RTOL = 1e-9


def _img(a, name):
    a = np.asarray(a, np.float64)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"{name}: expected a 2D image, got shape {a.shape}")
    return a


def _pair(a, b):
    a, b = _img(a, "a"), _img(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch {a.shape} vs {b.shape}")
    return a, b


def image_mse(est, gt):
    est, gt = _pair(est, gt)
    return float(np.mean((est - gt) ** 2))


def soft_iou_error(a, b):
    """``1 - sum(min) / sum(max)``; 0 when both images are all zero."""
    a, b = _pair(a, b)
    union = np.maximum(a, b).sum()
    if union <= 0:
        return 0.0
    return float(1.0 - np.minimum(a, b).sum() / union)


@dataclass
class Alignment:
    dx: int
    dy: int
    degenerate: bool = False

    @property
    def norm(self):
        return float(np.hypot(self.dx, self.dy))


def default_max_shift(shape):
    return min(shape) // 2


def align_by_correlation(est, gt, max_shift=None):
    """Integer shift ``(dx, dy)`` that best re-aligns ``est`` onto ``gt``.

    The score of a shift is ``sum_x gt(x) * est(x - s)`` with zero fill
    outside the frame. Scores within ``1e-9 * |gt| * |est|`` of the best count as ties and
    go to the smallest shift norm, then to the smallest ``(dx, dy)``.
    """
    est, gt = _pair(est, gt)
    h, w = gt.shape
    max_shift = default_max_shift(gt.shape) if max_shift is None else int(max_shift)
    if not 0 <= max_shift <= min(h, w) / 2:
        raise ValueError(f"max_shift must lie in [0, {min(h, w) / 2}], got {max_shift}")
    if not np.any(est) or not np.any(gt):
        return Alignment(0, 0, True)
    full = signal.correlate(gt, est, mode="full", method="fft")
    # full[i, j] is the score of shift (dy, dx) = (i - (h - 1), j - (w - 1))
    win = full[h - 1 - max_shift:h + max_shift, w - 1 - max_shift:w + max_shift]
    best = win.max()
    # scores are bounded by ||gt|| * ||est||; FFT round-off sits far below that scale
    tol = TIE_RTOL * np.linalg.norm(gt) * np.linalg.norm(est)
    iy, ix = np.nonzero(win >= best - tol)
    cand = [(float(np.hypot(x - max_shift, y - max_shift)), x - max_shift, y - max_shift) for y, x in zip(iy, ix)]
    _, dx, dy = min(cand)
    return Alignment(int(dx), int(dy))


def correlation_at(est, gt, dx, dy):
    """Direct evaluation of the alignment score at one shift."""
    est, gt = _pair(est, gt)
    return float(np.sum(gt * shift_image(est, dx, dy)))


def shift_image(img, dx, dy):
    """``out(x) = img(x - s)`` with zero fill; ``dx`` moves columns, ``dy`` rows."""
    img = np.asarray(img)
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        img[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def position_error(est, gt, max_shift=None, alignment=None):
    """Re-alignment shift length over the image diagonal; 1.0 for a degenerate estimate."""
    est, gt = _pair(est, gt)
    al = alignment or align_by_correlation(est, gt, max_shift)
    if al.degenerate:
        return 1.0 if np.any(gt) or np.any(est) else 0.0
    return al.norm / float(np.hypot(*gt.shape))


def shape_error(est, gt, threshold=0.0, max_shift=None, alignment=None):
    """``1 - IoU`` of the binary masks ``pixel > threshold`` after alignment."""
    est, gt = _pair(est, gt)
    al = alignment or align_by_correlation(est, gt, max_shift)
    me = shift_image(est, al.dx, al.dy) > threshold
    mg = gt > threshold
    union = np.count_nonzero(me | mg)
    if union == 0:
        return 0.0
    return float(1.0 - np.count_nonzero(me & mg) / union)


def depth_histogram(img, bins=HIST_BINS):
    img = _img(img, "img")
    counts, _ = np.histogram(np.clip(img, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts / img.size


def depth_hist_error(est, gt, bins=HIST_BINS):
    """MSE between the pixel-normalized 50-bin depth histograms."""
    est, gt = _pair(est, gt)
    return float(np.mean((depth_histogram(est, bins) - depth_histogram(gt, bins)) ** 2))


# reports ---------------------------------------------------------------------
METRICS = ("mse", "soft_iou", "depth_err", "shape_err", "pos_err")
CSV_COLUMNS = ["sample_id", *METRICS, "depth_err_pct"]


class MissingSamples(ValueError):
    def __init__(self, ids):
        super().__init__(f"{len(ids)} samples have no estimate: {', '.join(map(str, ids[:10]))}"
                         + (" ..." if len(ids) > 10 else ""))
        self.ids = list(ids)


def sample_metrics(est, gt, mask_threshold=0.0, max_shift=None):
    est, gt = _pair(est, gt)
    al = align_by_correlation(est, gt, max_shift)
    return {"mse": image_mse(est, gt), "soft_iou": soft_iou_error(est, gt),
            "depth_err": depth_hist_error(est, gt),
            "shape_err": shape_error(est, gt, mask_threshold, alignment=al),
            "pos_err": position_error(est, gt, alignment=al)}


@dataclass
class EvalReport:
    split: str
    ids: list
    rows: list = field(repr=False)      # dicts of METRICS per sample

    @property
    def count(self):
        return len(self.ids)

    @property
    def means(self):
        if not self.rows:
            return {k: float("nan") for k in METRICS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRICS}

    def column(self, key):
        return np.array([r[key] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(CSV_COLUMNS)
            for sid, r in zip(self.ids, self.rows):
                wr.writerow([sid] + [f"{r[k]:.12g}" for k in METRICS] + [f"{100 * r['depth_err']:.12g}"])
            m = self.means
            wr.writerow(["MEAN"] + [f"{m[k]:.12g}" for k in METRICS] + [f"{100 * m['depth_err']:.12g}"])


def evaluate(ids, estimates, ground_truth, split="test", mask_threshold=0.0, max_shift=None):
    """Per-sample metrics for aligned lists of estimates and ground-truth images.

    Estimates that are ``None`` or non-finite are reported together in a
    ``MissingSamples`` error rather than skipped.
    """
    ids = list(ids)
    if not (len(ids) == len(estimates) == len(ground_truth)):
        raise ValueError(f"{len(ids)} ids, {len(estimates)} estimates, {len(ground_truth)} ground-truth images")
    missing = [i for i, e in zip(ids, estimates) if e is None or not np.all(np.isfinite(e))]
    if missing:
        raise MissingSamples(missing)
    rows = [sample_metrics(e, g, mask_threshold, max_shift) for e, g in zip(estimates, ground_truth)]
    return EvalReport(split, ids, rows)


def read_report(path):
    """``(ids, rows, mean_row)`` from a report CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        rows = list(rd)
    body = [r for r in rows if r["sample_id"] != "MEAN"]
    mean = next(r for r in rows if r["sample_id"] == "MEAN")
    conv = lambda r: {k: float(r[k]) for k in METRICS}
    return [r["sample_id"] for r in body], [conv(r) for r in body], conv(mean)
