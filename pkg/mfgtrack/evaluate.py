from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np
import pandas as pd

from .box import center_error, overlap_ratio

# Pixel thresholds of the precision curve
PR_THRESHOLDS = np.arange(0, 51, 1.0)
# Overlap thresholds of the success curve
SR_THRESHOLDS = np.linspace(0, 1, 21)
SR_REPORT_THRESHOLD = 0.6


@dataclass
class EvalResult:
    pr_curve: np.ndarray
    sr_curve: np.ndarray
    pr_at_threshold: float
    sr_auc: float
    sr_at_report: float
    threshold: float = 20.0
    frames: int = 0

    def as_row(self) -> Dict[str, float]:
        return {
            "pr": self.pr_at_threshold,
            "sr_auc": self.sr_auc,
            f"sr@{SR_REPORT_THRESHOLD}": self.sr_at_report,
            "frames": self.frames,
        }


def _check_lengths(pred, gt) -> Tuple[List, List]:
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    if not pred:
        raise ValueError("Cannot evaluate an empty sequence")
    return pred, gt


def precision_curve(pred, gt, thresholds: np.ndarray = PR_THRESHOLDS) -> np.ndarray:
    """Fraction of frames with center error at most each threshold."""
    pred, gt = _check_lengths(pred, gt)
    errors = center_error(pred, gt)
    return (errors[:, None] <= np.asarray(thresholds)[None, :]).mean(axis=0)


def evaluate_pr(pred, gt, threshold: float = 20.0) -> float:
    """Precision rate: fraction of frames whose predicted center lies within `threshold` px."""
    return float(precision_curve(pred, gt, np.array([threshold]))[0])


def success_curve(pred, gt, thresholds: np.ndarray = SR_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose overlap strictly exceeds each threshold.

    A perfect overlap counts at the threshold of 1, so identical boxes score 1 everywhere.
    """
    pred, gt = _check_lengths(pred, gt)
    ious = overlap_ratio(pred, gt)[:, None]
    thresholds = np.asarray(thresholds)[None, :]
    hits = (ious > thresholds) | ((thresholds >= 1) & (ious >= 1 - 1e-12))
    return hits.mean(axis=0)


def evaluate_sr(pred, gt) -> Tuple[float, np.ndarray]:
    """Area under the success curve, taken as the mean over the 0.05-step grid.

    Returns:
        Tuple[float, np.ndarray]: (AUC, success curve).
    """
    curve = success_curve(pred, gt)
    return float(curve.mean()), curve


def evaluate(pred, gt, pr_threshold: float = 20.0) -> EvalResult:
    pred, gt = _check_lengths(pred, gt)
    auc, sr_curve = evaluate_sr(pred, gt)
    return EvalResult(
        pr_curve=precision_curve(pred, gt),
        sr_curve=sr_curve,
        pr_at_threshold=evaluate_pr(pred, gt, pr_threshold),
        sr_auc=auc,
        sr_at_report=float(success_curve(pred, gt, np.array([SR_REPORT_THRESHOLD]))[0]),
        threshold=pr_threshold,
        frames=len(pred),
    )


def evaluate_by_tag(
    runs: Iterable[Tuple[Iterable[str], List, List]],
    pr_threshold: float = 20.0,
) -> pd.DataFrame:
    """PR/SR pooled over all frames, then over the frames of each attribute tag.

    Args:
        runs: (tags, predicted boxes, ground-truth boxes) per sequence.

    Returns:
        pd.DataFrame: One row per tag, "all" first.
    """
    pooled: Dict[str, Tuple[List, List]] = {"all": ([], [])}
    for tags, pred, gt in runs:
        pred, gt = _check_lengths(pred, gt)
        for tag in ("all", *tags):
            preds, gts = pooled.setdefault(tag, ([], []))
            preds.extend(pred)
            gts.extend(gt)
    if not pooled["all"][0]:
        raise ValueError("Cannot evaluate without sequences")
    rows = []
    for tag, (pred, gt) in pooled.items():
        rows.append({"tag": tag, **evaluate(pred, gt, pr_threshold).as_row()})
    return pd.DataFrame(rows).set_index("tag")
