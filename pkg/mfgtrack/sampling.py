import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .box import BoundingBox, as_box_array, clip_boxes, overlap_ratio
from .errors import BoxError

# Ratio of one scale step of the Gaussian sampler
SCALE_STEP = 1.05


@dataclass
class LabeledSamples:
    # (n, 4) rows of x, y, w, h
    positives: np.ndarray
    negatives: np.ndarray


def sample_gaussian(
    center: BoundingBox,
    n: int,
    image_size: Tuple[int, int],
    sigma_xy: float = 0.3,
    scale_steps: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Draws `n` boxes around `center`.

    Translations follow Normal(0, sigma_xy * mean(w, h)) per axis. Both sides are multiplied
    by 1.05 ** Normal(0, scale_steps), so the log scale has a spread of scale_steps * ln 1.05.

    Returns:
        np.ndarray: (n, 4) rows of x, y, w, h clipped to the image of (height, width).
    """
    if n < 1:
        raise ValueError(f"Need at least one sample, got n={n}")
    height, width = image_size
    cx, cy = center.center
    if not (0 <= cx <= width and 0 <= cy <= height):
        raise BoxError(f"Sampling center {center} lies outside the {height}x{width} image")
    rng = rng or np.random.default_rng()
    size = (center.w + center.h) / 2
    offsets = rng.normal(0.0, 1.0, size=(n, 2)) * sigma_xy * size
    scales = SCALE_STEP ** (rng.normal(0.0, 1.0, size=n) * scale_steps)
    boxes = np.empty((n, 4))
    boxes[:, 2] = center.w * scales
    boxes[:, 3] = center.h * scales
    boxes[:, 0] = cx + offsets[:, 0] - boxes[:, 2] / 2
    boxes[:, 1] = cy + offsets[:, 1] - boxes[:, 3] / 2
    return clip_boxes(boxes, image_size)


def sample_uniform(
    center: BoundingBox,
    n: int,
    image_size: Tuple[int, int],
    spread: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Boxes of the center's size with uniform translations.

    Offsets lie within +-spread * mean(w, h); without a spread the whole image is covered.
    """
    rng = rng or np.random.default_rng()
    height, width = image_size
    boxes = np.empty((n, 4))
    boxes[:, 2], boxes[:, 3] = center.w, center.h
    if spread is None:
        boxes[:, 0] = rng.uniform(0, max(width - center.w, 0), size=n)
        boxes[:, 1] = rng.uniform(0, max(height - center.h, 0), size=n)
    else:
        reach = spread * (center.w + center.h) / 2
        boxes[:, 0] = center.x + rng.uniform(-reach, reach, size=n)
        boxes[:, 1] = center.y + rng.uniform(-reach, reach, size=n)
    return clip_boxes(boxes, image_size)


def sample_grid(
    center: BoundingBox,
    image_size: Tuple[int, int],
    stride: float = 0.25,
) -> np.ndarray:
    """Boxes of the center's size tiling the whole image in steps of stride * mean(w, h)."""
    if stride <= 0:
        raise ValueError(f"Grid stride must be positive, got {stride}")
    height, width = image_size
    step = max(stride * (center.w + center.h) / 2, 1.0)
    xs = np.arange(0, max(width - center.w, 0) + step / 2, step)
    ys = np.arange(0, max(height - center.h, 0) + step / 2, step)
    grid_x, grid_y = np.meshgrid(xs, ys)
    boxes = np.empty((grid_x.size, 4))
    boxes[:, 0], boxes[:, 1] = grid_x.ravel(), grid_y.ravel()
    boxes[:, 2], boxes[:, 3] = center.w, center.h
    return clip_boxes(boxes, image_size)


def label_samples(
    samples, gt: BoundingBox, pos_iou: float = 0.7, neg_iou: float = 0.5
) -> LabeledSamples:
    """Splits samples into positives (IoU in [pos_iou, 1]) and negatives (IoU < neg_iou).

    Samples in between are discarded.
    """
    boxes = as_box_array(samples)
    iou = overlap_ratio(boxes, gt)
    return LabeledSamples(boxes[iou >= pos_iou], boxes[iou < neg_iou])


def draw_training_samples(
    gt: BoundingBox,
    image_size: Tuple[int, int],
    n_pos: int,
    n_neg: int,
    pos_iou: float = 0.7,
    neg_iou: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    log: Optional[logging.Logger] = None,
) -> LabeledSamples:
    """Draws exactly `n_pos` positives and `n_neg` negatives around `gt`.

    Positives come from a tight Gaussian whose spread is halved until enough samples pass
    the IoU threshold. Negatives mix a wide uniform window with whole-image draws.
    """
    rng = rng or np.random.default_rng()
    sigma_xy, scale_steps = 0.1, 1.3
    positives = np.empty((0, 4))
    for _ in range(6):
        candidates = sample_gaussian(gt, 2 * n_pos, image_size, sigma_xy, scale_steps, rng)
        positives = label_samples(candidates, gt, pos_iou, neg_iou).positives
        if len(positives) >= n_pos:
            break
        if log:
            log.info(
                "Only %i of %i positives at spread %.3f, resampling tighter",
                len(positives),
                n_pos,
                sigma_xy,
            )
        sigma_xy, scale_steps = sigma_xy / 2, scale_steps / 2
    if len(positives) == 0:
        positives = gt.to_array()[None]
    positives = positives[rng.choice(len(positives), n_pos, replace=len(positives) < n_pos)]

    negatives = np.empty((0, 4))
    for _ in range(10):
        candidates = np.concatenate(
            [
                sample_uniform(gt, n_neg, image_size, spread=1.5, rng=rng),
                sample_uniform(gt, n_neg, image_size, rng=rng),
            ]
        )
        found = label_samples(candidates, gt, pos_iou, neg_iou).negatives
        negatives = np.concatenate([negatives, found])
        if len(negatives) >= n_neg:
            break
    if len(negatives) == 0:
        raise BoxError(f"No negatives can be drawn around {gt} in a {image_size} image")
    negatives = negatives[rng.choice(len(negatives), n_neg, replace=len(negatives) < n_neg)]
    return LabeledSamples(positives, negatives)


def select_hard_negatives(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the `k` negatives the classifier scores most confidently as target."""
    return torch.topk(scores, min(k, scores.shape[0])).indices
