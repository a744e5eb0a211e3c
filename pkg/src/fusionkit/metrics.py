"""Depth-quality metrics for prediction and completion benchmarks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ParameterError
from .validation import check_depth, check_same_shape

__all__ = ["MetricReport", "EIGEN_CROP", "crop_rectangle", "depth_metrics", "METRIC_NAMES"]

# Garg/Eigen evaluation crop as fractions of (height, height, width, width)
EIGEN_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "rmse_mm", "irmse", "imae", "n_valid")


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    rmse_mm: float
    irmse: float
    imae: float
    n_valid: int

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, k)) if k != "n_valid" else str(self.n_valid) for k in METRIC_NAMES)

    def table(self) -> str:
        head = " | ".join(f"{k:>9}" for k in METRIC_NAMES[:7])
        vals = " | ".join(f"{getattr(self, k):9.4f}" for k in METRIC_NAMES[:7])
        return f"{head}\n{vals}"


def crop_rectangle(crop, shape):
    """Resolve ``crop`` into integer ``(top, bottom, left, right)`` bounds (end exclusive).

    ``crop`` may be None (full image), ``"eigen"``, or a 4-tuple of pixel
    bounds.
    """
    h, w = shape
    if crop is None:
        return 0, h, 0, w
    if isinstance(crop, str):
        if crop != "eigen":
            raise ParameterError(f"unknown crop {crop!r}")
        t, b, l, r = EIGEN_CROP
        return int(t * h), int(b * h), int(l * w), int(r * w)
    top, bottom, left, right = (int(x) for x in crop)
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise ParameterError(f"crop {crop} does not fit a {w}x{h} image")
    return top, bottom, left, right


def depth_metrics(pred, gt, cap=80.0, crop=None, min_depth=1e-3) -> MetricReport:
    """Standard error and accuracy metrics over valid ground-truth pixels.

    Valid pixels have ``min_depth < gt <= cap`` and lie inside ``crop``.
    Predictions are clipped to ``[min_depth, cap]`` before comparison.
    Threshold accuracies use the strict test ``max(p/g, g/p) < 1.25**k``.
    ``irmse``/``imae`` are computed on inverse depth in 1/km and ``rmse_mm``
    is the RMSE in millimetres.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = check_depth(gt, "gt")
    check_same_shape(pred, gt, ("pred", "gt"))
    top, bottom, left, right = crop_rectangle(crop, gt.shape)
    region = np.zeros(gt.shape, dtype=bool)
    region[top:bottom, left:right] = True
    valid = region & (gt > min_depth) & (gt <= cap)
    n = int(valid.sum())
    if n == 0:
        raise ParameterError("no valid ground-truth pixels after cap/crop")
    g = gt[valid]
    p = pred[valid]
    if not np.all(np.isfinite(p)):
        raise ParameterError("pred contains non-finite values on valid pixels")
    p = np.clip(p, min_depth, cap)

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    inv_diff = 1000.0 / p - 1000.0 / g
    rmse = float(np.sqrt(np.mean(diff**2)))
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=rmse,
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        rmse_mm=rmse * 1000.0,
        irmse=float(np.sqrt(np.mean(inv_diff**2))),
        imae=float(np.mean(np.abs(inv_diff))),
        n_valid=n,
    )
