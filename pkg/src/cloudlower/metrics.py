"""Cloud-mask accuracy metrics and mask morphology.

Cloud is the positive class. All ratios come from the four confusion counts;
any ratio whose denominator is zero is reported as None (never coerced to a
number). The exact definitions, also embedded in every report:

    oa         = (tp+tn) / (tp+fp+fn+tn)
    commission = fp / (tp+fp)
    omission   = fn / (tp+fn)
    iou_cloud  = tp / (tp+fp+fn)
    iou_clear  = tn / (tn+fp+fn)
    miou       = (iou_cloud + iou_clear) / 2

Dilation uses the Chebyshev disc: a pixel is cloud after dilate(mask, r) iff
any cloud pixel lies within the (2r+1) x (2r+1) square around it. Pixels
outside the image count as clear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

DEFINITIONS = {
    "oa": "(tp+tn)/(tp+fp+fn+tn)",
    "commission": "fp/(tp+fp)",
    "omission": "fn/(tp+fn)",
    "iou_cloud": "tp/(tp+fp+fn)",
    "iou_clear": "tn/(tn+fp+fn)",
    "miou": "(iou_cloud+iou_clear)/2",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    counts: ConfusionMatrix
    oa: float | None
    commission: float | None
    omission: float | None
    iou_cloud: float | None
    iou_clear: float | None
    miou: float | None

    def to_json_dict(self) -> dict:
        c = self.counts
        return {
            "counts": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, "total": c.total},
            "oa": self.oa,
            "commission": self.commission,
            "omission": self.omission,
            "iou_cloud": self.iou_cloud,
            "iou_clear": self.iou_clear,
            "miou": self.miou,
            "definitions": dict(DEFINITIONS),
        }


def _check_mask(mask: np.ndarray, name: str) -> None:
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got {mask.ndim}-D")
    if not np.all((mask == 0) | (mask == 1)):
        raise ConfigError(f"{name} must contain only 0 and 1")


def threshold_mask(prob: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Probability >= t becomes cloud. t must lie in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"threshold must be in [0,1], got {t}")
    if prob.ndim != 2:
        raise DimensionError(f"probability map must be 2-D, got {prob.ndim}-D")
    return (prob >= np.float32(t)).astype(np.uint8)


def confusion(pred: np.ndarray, ref: np.ndarray) -> ConfusionMatrix:
    """Pixel counts with cloud positive."""
    _check_mask(pred, "pred")
    _check_mask(ref, "ref")
    if pred.shape != ref.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    p = pred.astype(bool)
    r = ref.astype(bool)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = int(np.count_nonzero(~p & ~r))
    return ConfusionMatrix(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def report(cm: ConfusionMatrix) -> MetricReport:
    """All metrics from one confusion matrix; undefined ratios become None."""
    iou_cloud = _ratio(cm.tp, cm.tp + cm.fp + cm.fn)
    iou_clear = _ratio(cm.tn, cm.tn + cm.fp + cm.fn)
    miou = None
    if iou_cloud is not None and iou_clear is not None:
        miou = (iou_cloud + iou_clear) / 2
    return MetricReport(
        counts=cm,
        oa=_ratio(cm.tp + cm.tn, cm.total),
        commission=_ratio(cm.fp, cm.tp + cm.fp),
        omission=_ratio(cm.fn, cm.tp + cm.fn),
        iou_cloud=iou_cloud,
        iou_clear=iou_clear,
        miou=miou,
    )


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation by a (2r+1) square, separable running max per axis.

    Extensive (output covers input), monotone in the mask, and additive in
    the radius: dilate(dilate(m, a), b) == dilate(m, a+b).
    """
    _check_mask(mask, "mask")
    if radius < 0:
        raise ConfigError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.copy()
    out = mask
    for axis in (0, 1):
        n = out.shape[axis]
        zshape = list(out.shape)
        zshape[axis] = radius
        zeros = np.zeros(zshape, out.dtype)
        padded = np.concatenate([zeros, out, zeros], axis=axis)
        shifted = [
            padded.take(range(d, d + n), axis=axis) for d in range(2 * radius + 1)
        ]
        out = np.maximum.reduce(shifted)
    return out.astype(np.uint8)
