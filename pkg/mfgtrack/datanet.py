"""Direction-aware target-driven attention for global re-detection.

A clip of frame pairs plus the first-frame template is encoded by a small residual
CNN, swept by recurrent cells along rows, columns and a transposed motion axis,
and decoded into a per-pixel target likelihood.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .box import BoundingBox, as_box_array, clip_boxes
from .config import DatanetConfig
from .errors import ShapeError
from .frame import FramePair, ImageTensor, Modality


@dataclass(frozen=True)
class Profile:
    # Widths of the four encoder stages
    widths: Tuple[int, int, int, int]
    # Channels each of the two tapped layers is projected to
    tap: int
    # Hidden size of one sweep direction
    sweep_hidden: int
    # Output widths of the five decoder groups
    decoder: Tuple[int, int, int, int, int]


PROFILES = {
    "full": Profile((32, 64, 128, 256), 512, 256, (256, 128, 64, 32, 16)),
    "desk": Profile((8, 16, 32, 32), 32, 16, (32, 16, 16, 8, 8)),
}


def feature_side(input_size: int) -> int:
    """Side of the encoder grid after four stride-2 stages (300 -> 19)."""
    side = input_size
    for _ in range(4):
        side = (side + 1) // 2
    return side


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )[0]


def resize_pair(pair: FramePair, size: int) -> FramePair:
    return FramePair(
        ImageTensor(resize_image(pair.visible.data, size), Modality.Visible),
        ImageTensor(resize_image(pair.thermal.data, size), Modality.Thermal),
    )


def crop_template(pair: FramePair, box: BoundingBox, size: int) -> FramePair:
    """Crops the target box out of both modalities and resizes the crops to size x size."""
    x, y, w, h = clip_boxes(box.to_array(), pair.size)[0]
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = max(int(math.ceil(x + w)), x0 + 1), max(int(math.ceil(y + h)), y0 + 1)
    return FramePair(
        ImageTensor(resize_image(pair.visible.data[:, y0:y1, x0:x1], size), Modality.Visible),
        ImageTensor(resize_image(pair.thermal.data[:, y0:y1, x0:x1], size), Modality.Thermal),
    )


@dataclass(frozen=True)
class ClipInput:
    frames: Tuple[FramePair, ...]
    template: FramePair

    def __post_init__(self):
        if not self.frames:
            raise ShapeError("A clip needs at least one frame pair")
        sizes = {pair.size for pair in self.frames} | {self.template.size}
        if len(sizes) != 1:
            raise ShapeError(f"Clip images must share one size, got {sorted(sizes)}")
        height, width = sizes.pop()
        if height != width:
            raise ShapeError(f"Clip images must be square, got {height}x{width}")

    @property
    def size(self) -> int:
        return self.template.size[0]

    @staticmethod
    def build(frames: Sequence[FramePair], template: FramePair, size: int) -> "ClipInput":
        """Resizes frames and template to size x size."""
        return ClipInput(
            tuple(resize_pair(pair, size) for pair in frames),
            template if template.size == (size, size) else resize_pair(template, size),
        )

    def to_tensor(self) -> torch.Tensor:
        """(T+1)x2x3xSxS tensor, template first."""
        return torch.stack([pair.stacked() for pair in (self.template, *self.frames)])


@dataclass(frozen=True)
class AttentionMap:
    # HxW target likelihood in [0, 1]
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"Attention map must be HxW, got {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("Attention map has non-finite values")
        if float(self.data.min()) < 0 or float(self.data.max()) > 1:
            raise ValueError("Attention map values must lie in [0, 1]")

    def resized(self, size: Tuple[int, int]) -> "AttentionMap":
        data = F.interpolate(
            self.data[None, None], size=size, mode="bilinear", align_corners=False
        )[0, 0]
        return AttentionMap(data.clamp(0, 1))

    def save(self, path: Union[str, Path]):
        """Writes the map as an 8-bit grayscale image."""
        image = (self.data.detach().cpu().numpy() * 255).round().astype(np.uint8)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(path), image)


@dataclass(frozen=True)
class SweepFeatures:
    spatial: torch.Tensor
    temporal: torch.Tensor
    combined: torch.Tensor

    def __post_init__(self):
        if self.combined.shape[-3] != self.spatial.shape[-3] + self.temporal.shape[-3]:
            raise ShapeError("Combined channels must equal spatial plus temporal channels")


@dataclass(frozen=True)
class RecurrentCellParams:
    # hidden x input
    W: torch.Tensor
    W_f: torch.Tensor
    W_r: torch.Tensor
    # hidden
    b_f: torch.Tensor
    b_r: torch.Tensor
    # Projection of the skip path, None when input and hidden sizes agree
    W_s: Optional[torch.Tensor] = None


def recurrent_step(
    params: RecurrentCellParams, x_t: torch.Tensor, c_prev: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One step of the gated recurrence with a highway skip.

        x_hat = W x
        f = sigmoid(W_f x + b_f)
        r = sigmoid(W_r x + b_r)
        c = f * c_prev + (1 - f) * x_hat
        h = r * tanh(c) + (1 - r) * x

    Args:
        x_t (torch.Tensor): Nxinput inputs.
        c_prev (torch.Tensor): Nxhidden previous cell states.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (h_t, c_t), both Nxhidden.
    """
    if x_t.shape[-1] != params.W.shape[1]:
        raise ShapeError(f"Input size {x_t.shape[-1]} does not match {params.W.shape[1]}")
    if c_prev.shape[-1] != params.W.shape[0]:
        raise ShapeError(f"Cell size {c_prev.shape[-1]} does not match {params.W.shape[0]}")
    skip = x_t if params.W_s is None else x_t @ params.W_s.T
    if skip.shape[-1] != params.W.shape[0]:
        raise ShapeError("Input and hidden sizes differ and no skip projection is given")
    x_hat = x_t @ params.W.T
    f = torch.sigmoid(x_t @ params.W_f.T + params.b_f)
    r = torch.sigmoid(x_t @ params.W_r.T + params.b_r)
    c_t = f * c_prev + (1 - f) * x_hat
    h_t = r * torch.tanh(c_t) + (1 - r) * skip
    return h_t, c_t


def recurrent_scan(
    params: RecurrentCellParams, xs: torch.Tensor, reverse: bool = False
) -> torch.Tensor:
    """Runs the recurrence over LxNxinput sequences from a zero cell state."""
    c = xs.new_zeros(xs.shape[1], params.W.shape[0])
    outputs: List[torch.Tensor] = [xs.new_empty(0)] * xs.shape[0]
    steps = range(xs.shape[0] - 1, -1, -1) if reverse else range(xs.shape[0])
    for t in steps:
        outputs[t], c = recurrent_step(params, xs[t], c)
    return torch.stack(outputs)


class RecurrentCell(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.transform = nn.Linear(input_size, hidden_size, bias=False)
        self.forget = nn.Linear(input_size, hidden_size)
        self.reset = nn.Linear(input_size, hidden_size)
        self.skip = (
            None if input_size == hidden_size else nn.Linear(input_size, hidden_size, bias=False)
        )

    def params(self) -> RecurrentCellParams:
        return RecurrentCellParams(
            W=self.transform.weight,
            W_f=self.forget.weight,
            W_r=self.reset.weight,
            b_f=self.forget.bias,
            b_r=self.reset.bias,
            W_s=None if self.skip is None else self.skip.weight,
        )


def sweep_rows(params: RecurrentCellParams, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sweeps every row of a BxCxHxW map left-to-right and right-to-left."""
    b, c, h, w = x.shape
    xs = x.permute(3, 0, 2, 1).reshape(w, b * h, c)
    forward = recurrent_scan(params, xs).view(w, b, h, -1).permute(1, 3, 2, 0)
    backward = recurrent_scan(params, xs, reverse=True).view(w, b, h, -1).permute(1, 3, 2, 0)
    return forward, backward


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ClipEncoder(nn.Module):
    """Four stride-2 residual stages; the last two are tapped, projected and concatenated."""

    def __init__(self, profile: Profile):
        super().__init__()
        stages = []
        in_channels = 3
        for width in profile.widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
                    nn.ReLU(),
                    ResidualBlock(width),
                )
            )
            in_channels = width
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(
            [nn.Conv2d(profile.widths[2], profile.tap, 1), nn.Conv2d(profile.widths[3], profile.tap, 1)]
        )
        self.channels = 2 * profile.tap

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        side = taps[3].shape[-2:]
        low = F.adaptive_avg_pool2d(taps[2], side)
        return torch.cat([self.lateral[0](low), self.lateral[1](taps[3])], dim=1)


class DecoderGroup(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, size: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.ConvTranspose2d(in_channels, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(size=(size, size), mode="bilinear", align_corners=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def decoder_sizes(side: int, output: int, groups: int = 5) -> List[int]:
    """Geometric upsampling schedule from the feature grid to the output size."""
    ratio = output / side
    sizes = [int(round(side * ratio ** (i / groups))) for i in range(1, groups)]
    return sizes + [output]


class DaTANet(nn.Module):
    def __init__(self, cfg: DatanetConfig = DatanetConfig()):
        super().__init__()
        profile = PROFILES[cfg.profile]
        self.profile = profile
        self.clip_len = cfg.clip_len
        self.input_size = cfg.input_size
        self.side = feature_side(cfg.input_size)
        self.encoder = ClipEncoder(profile)
        self.clip_channels = (cfg.clip_len + 1) * self.encoder.channels
        self.spatial_channels = 4 * profile.sweep_hidden
        # The motion cube is side x side x side
        self.temporal_channels = self.side
        self.spatial_in = nn.Conv2d(self.clip_channels, self.spatial_channels, 1)
        self.temporal_in = nn.Conv2d(self.clip_channels, self.temporal_channels, 1)
        # Left/right share one cell and up/down another
        self.horizontal = RecurrentCell(self.spatial_channels, profile.sweep_hidden)
        self.vertical = RecurrentCell(self.spatial_channels, profile.sweep_hidden)
        self.forward_time = RecurrentCell(self.temporal_channels, self.temporal_channels)
        self.backward_time = RecurrentCell(self.temporal_channels, self.temporal_channels)
        groups = []
        in_channels = self.combined_channels
        for width, size in zip(profile.decoder, decoder_sizes(self.side, cfg.input_size)):
            groups.append(DecoderGroup(in_channels, width, size))
            in_channels = width
        self.decoder = nn.Sequential(*groups)
        self.head = nn.Conv2d(in_channels, 1, 1)

    @property
    def combined_channels(self) -> int:
        return self.spatial_channels + self.temporal_channels

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """Encodes Bx(T+1)x2x3xSxS clip tensors into Bx((T+1)*P)xsidexside."""
        if images.ndim != 6 or images.shape[2:4] != (2, 3):
            raise ShapeError(f"Expected Bx(T+1)x2x3xSxS clips, got {tuple(images.shape)}")
        b, n, _, _, height, width = images.shape
        if n != self.clip_len + 1:
            raise ShapeError(f"Expected {self.clip_len} frames plus template, got {n} images")
        if (height, width) != (self.input_size, self.input_size):
            raise ShapeError(
                f"Clip images must be {self.input_size}x{self.input_size}, got {height}x{width}"
            )
        features = self.encoder(images.reshape(b * n * 2, 3, height, width))
        features = features.view(b, n, 2, *features.shape[1:]).sum(dim=2)
        return features.flatten(1, 2)

    def encode_clip(self, clip: ClipInput) -> torch.Tensor:
        """((T+1)*P)xsidexside features of one clip; visible and thermal maps summed per pair."""
        return self.encode_images(clip.to_tensor().unsqueeze(0))[0]

    def spatial_sweep(self, features: torch.Tensor) -> torch.Tensor:
        """Four directional sweeps concatenated as [left, right, up, down]."""
        x = features if features.ndim == 4 else features.unsqueeze(0)
        if x.shape[-1] != x.shape[-2]:
            raise ShapeError(f"Spatial sweep needs a square map, got {tuple(x.shape[-2:])}")
        left, right = sweep_rows(self.horizontal.params(), x)
        up, down = sweep_rows(self.vertical.params(), x.transpose(2, 3))
        out = torch.cat([left, right, up.transpose(2, 3), down.transpose(2, 3)], dim=1)
        return out if features.ndim == 4 else out[0]

    def temporal_sweep(self, features: torch.Tensor, reduce: bool = True) -> torch.Tensor:
        """Swaps the first two axes of a side^3 cube, sweeps the new leading axis in both
        directions, and swaps back.

        Args:
            features (torch.Tensor): Clip features, or an already reduced cube when
                `reduce` is False.
            reduce (bool, optional): Project the clip features to the cube with the 1x1
                encoder first. Defaults to True.
        """
        x = features if features.ndim == 4 else features.unsqueeze(0)
        if reduce:
            x = self.temporal_in(x)
        elif x.shape[1] != self.temporal_channels:
            raise ShapeError(
                f"Expected a {self.temporal_channels}-channel cube, got {x.shape[1]} channels"
            )
        out = transposed_sweep(self.forward_time.params(), self.backward_time.params(), x)
        return out if features.ndim == 4 else out[0]

    def sweep(self, clip_features: torch.Tensor) -> SweepFeatures:
        spatial = self.spatial_sweep(self.spatial_in(clip_features))
        temporal = self.temporal_sweep(clip_features)
        return SweepFeatures(spatial, temporal, torch.cat([spatial, temporal], dim=1))

    def decode_attention(self, combined: Union[SweepFeatures, torch.Tensor]) -> torch.Tensor:
        """Decodes combined sweep features into BxSxS likelihoods in [0, 1]."""
        x = combined.combined if isinstance(combined, SweepFeatures) else combined
        batched = x.ndim == 4
        x = x if batched else x.unsqueeze(0)
        if x.shape[1] != self.combined_channels:
            raise ShapeError(f"Expected {self.combined_channels} channels, got {x.shape[1]}")
        out = torch.sigmoid(self.head(self.decoder(x)))[:, 0]
        return out if batched else out[0]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode_attention(self.sweep(self.encode_images(images)))

    @torch.no_grad()
    def predict(self, clip: ClipInput) -> AttentionMap:
        was_training = self.training
        self.eval()
        att = self(clip.to_tensor().unsqueeze(0))[0]
        self.train(was_training)
        return AttentionMap(att.clamp(0, 1))


def transposed_sweep(
    forward: RecurrentCellParams, backward: RecurrentCellParams, x: torch.Tensor
) -> torch.Tensor:
    """Bidirectional recurrence along the second axis of a BxCxHxW cube after swapping
    C and H. Columns are independent sequences; the two directions are summed."""
    b, c, h, w = x.shape
    # After the swap the leading axis H is the sequence, C the feature and W the batch
    xs = x.transpose(1, 2).permute(1, 0, 3, 2).reshape(h, b * w, c)
    out = recurrent_scan(forward, xs) + recurrent_scan(backward, xs, reverse=True)
    return out.view(h, b, w, -1).permute(1, 0, 3, 2).transpose(1, 2)


@dataclass
class GlobalProposals:
    # (k, 4) rows of x, y, w, h
    boxes: np.ndarray
    # Set when the map had no usable peak and a uniform grid was returned
    uniform_fallback: bool = False


def find_peaks(att: torch.Tensor, num_peaks: int, window: int) -> List[Tuple[int, int]]:
    """Greedy non-maximum suppression over local maxima, ties broken by raster order.

    A constant map has no peak.

    Returns:
        List[Tuple[int, int]]: (row, col) of up to `num_peaks` peaks, strongest first.
    """
    data = att.detach().double()
    if float(data.max()) <= float(data.min()):
        return []
    pooled = F.max_pool2d(data[None, None], window, stride=1, padding=window // 2)[0, 0]
    pooled = pooled[: data.shape[0], : data.shape[1]]
    values = data.cpu().numpy().ravel()
    candidates = np.flatnonzero(((data >= pooled) & (data > 0)).cpu().numpy().ravel())
    order = candidates[np.lexsort((candidates, -values[candidates]))]
    width = data.shape[1]
    radius = window // 2
    peaks: List[Tuple[int, int]] = []
    for index in order:
        row, col = divmod(int(index), width)
        if all(abs(row - r) > radius or abs(col - c) > radius for r, c in peaks):
            peaks.append((row, col))
            if len(peaks) == num_peaks:
                break
    return peaks


def sample_global_proposals(
    att: Union[AttentionMap, torch.Tensor],
    k: int,
    box_prior: BoundingBox,
    cfg: DatanetConfig = DatanetConfig(),
    rng: Optional[np.random.Generator] = None,
    log: Optional[logging.Logger] = None,
) -> GlobalProposals:
    """Boxes of the prior's size centered on attention peaks.

    The first box on each peak keeps the prior size exactly; further boxes cycle through
    the peaks with a uniform scale jitter of +-`cfg.scale_jitter`.
    """
    if k < 1:
        raise ValueError(f"Need at least one proposal, got k={k}")
    data = att.data if isinstance(att, AttentionMap) else att
    rng = rng or np.random.default_rng()
    image_size = (int(data.shape[0]), int(data.shape[1]))
    finite = bool(torch.isfinite(data).all())
    peaks = find_peaks(data, cfg.num_peaks, cfg.peak_window) if finite else []
    fallback = not peaks
    if fallback:
        if log:
            log.warning("Attention map has no peak, falling back to uniform grid proposals")
        per_side = int(math.ceil(math.sqrt(k)))
        step_y, step_x = image_size[0] / per_side, image_size[1] / per_side
        centers = [
            ((i + 0.5) * step_y, (j + 0.5) * step_x)
            for i in range(per_side)
            for j in range(per_side)
        ][:k]
    else:
        centers = [(row + 0.5, col + 0.5) for row, col in peaks]
    boxes = np.empty((k, 4))
    for i in range(k):
        cy, cx = centers[i % len(centers)]
        scale = 1.0
        if i >= len(centers):
            scale = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter)
        w, h = box_prior.w * scale, box_prior.h * scale
        boxes[i] = (cx - w / 2, cy - h / 2, w, h)
    return GlobalProposals(clip_boxes(boxes, image_size), fallback)


def rank_by_attention(att: Union[AttentionMap, torch.Tensor], boxes, k: int) -> np.ndarray:
    """The `k` boxes holding the highest mean attention, strongest first.

    Box sums come from a summed-area table of the map, with box edges rounded to pixels.
    """
    data = (att.data if isinstance(att, AttentionMap) else att).detach().double().cpu()
    arr = as_box_array(boxes)
    if len(arr) == 0:
        return arr
    height, width = data.shape
    table = F.pad(data.cumsum(0).cumsum(1), (1, 0, 1, 0)).numpy()
    x0 = np.clip(np.round(arr[:, 0]), 0, width - 1).astype(int)
    y0 = np.clip(np.round(arr[:, 1]), 0, height - 1).astype(int)
    x1 = np.clip(np.round(arr[:, 0] + arr[:, 2]), x0 + 1, width).astype(int)
    y1 = np.clip(np.round(arr[:, 1] + arr[:, 3]), y0 + 1, height).astype(int)
    mass = table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]
    mean = mass / ((x1 - x0) * (y1 - y0))
    order = np.argsort(-mean, kind="stable")[:k]
    return arr[order]


def attention_centroid(att: Union[AttentionMap, torch.Tensor]) -> Tuple[float, float]:
    """(x, y) centroid of the attention mass above the map's median, in pixels.

    The median is taken as the background level; a map without mass above it yields
    the image center.
    """
    data = (att.data if isinstance(att, AttentionMap) else att).detach().double()
    height, width = data.shape
    mass = (data - data.median()).clamp(min=0)
    total = float(mass.sum())
    if total == 0:
        return width / 2, height / 2
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.double) + 0.5,
        torch.arange(width, dtype=torch.double) + 0.5,
        indexing="ij",
    )
    return float((mass * xs).sum()) / total, float((mass * ys).sum()) / total


def centroid_hit_rate(model: DaTANet, record, cfg: DatanetConfig = DatanetConfig()) -> float:
    """Fraction of visible frames after the first whose attention centroid lies in the
    ground-truth box."""
    template = crop_template(record.frames[0], record.boxes[0], cfg.input_size)
    hidden = set(record.occluded)
    hits = []
    for t in range(1, len(record.frames)):
        if t in hidden:
            continue
        indices = [max(i, 0) for i in range(t - cfg.clip_len + 1, t + 1)]
        clip = ClipInput.build([record.frames[i] for i in indices], template, cfg.input_size)
        x, y = attention_centroid(model.predict(clip).resized(record.image_size))
        box = record.boxes[t]
        hits.append(box.x <= x <= box.x + box.w and box.y <= y <= box.y + box.h)
    return float(np.mean(hits)) if hits else 0.0


def box_mask(box: BoundingBox, image_size: Tuple[int, int], size: int) -> torch.Tensor:
    """SxS binary mask, white inside the box scaled from an image of (height, width)."""
    height, width = image_size
    x, y, w, h = as_box_array(box)[0]
    mask = torch.zeros(size, size)
    sy, sx = size / height, size / width
    y0, y1 = int(round(y * sy)), max(int(round((y + h) * sy)), int(round(y * sy)) + 1)
    x0, x1 = int(round(x * sx)), max(int(round((x + w) * sx)), int(round(x * sx)) + 1)
    mask[y0:y1, x0:x1] = 1
    return mask


def read_mask(path: Union[str, Path], size: int) -> torch.Tensor:
    """Reads a white-target, black-background image as an SxS binary mask."""
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise FileNotFoundError(f"Unable to read mask {path}")
    image = cv2.resize(image, (size, size), interpolation=cv2.INTER_NEAREST)
    return torch.from_numpy((image > 127).astype(np.float32))


def attention_bce(att: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy, log terms clamped at -100."""
    if att.shape != mask.shape:
        raise ShapeError(f"Attention {tuple(att.shape)} and mask {tuple(mask.shape)} differ")
    return F.binary_cross_entropy(att, mask.to(att.dtype))


def attention_training_step(
    model: DaTANet,
    clips: torch.Tensor,
    masks: torch.Tensor,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> float:
    """Forward pass, BCE against the masks, and an optimizer step when one is given.

    Args:
        clips (torch.Tensor): Bx(T+1)x2x3xSxS clip tensors (or one clip without B).
        masks (torch.Tensor): BxSxS binary masks (or one mask without B).
    """
    if clips.ndim == 5:
        clips, masks = clips.unsqueeze(0), masks.unsqueeze(0)
    if masks.shape[-2:] != (model.input_size, model.input_size):
        raise ShapeError(
            f"Mask size {tuple(masks.shape[-2:])} does not match attention size {model.input_size}"
        )
    model.train()
    loss = attention_bce(model(clips), masks)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def sample_clips(
    sequences: Sequence,
    cfg: DatanetConfig,
    rng: np.random.Generator,
) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Draws (clip tensor, mask) training pairs from sequence records.

    Masks are read from the record's mask images when it has them, otherwise they are
    filled from the ground-truth box.
    """
    pairs = []
    for record in sequences:
        template = crop_template(record.frames[0], record.boxes[0], cfg.input_size)
        last = len(record.frames) - 1
        for _ in range(cfg.clips_per_sequence):
            t = int(rng.integers(min(cfg.clip_len - 1, last), last + 1))
            indices = [max(i, 0) for i in range(t - cfg.clip_len + 1, t + 1)]
            clip = ClipInput.build([record.frames[i] for i in indices], template, cfg.input_size)
            if record.masks:
                mask = read_mask(record.masks[t], cfg.input_size)
            else:
                mask = box_mask(record.boxes[t], record.frames[t].size, cfg.input_size)
            pairs.append((clip.to_tensor(), mask))
    return pairs


def train_attention(
    model: DaTANet,
    sequences: Sequence,
    cfg: DatanetConfig = DatanetConfig(),
    seed: int = 0,
    log: Optional[logging.Logger] = None,
) -> List[float]:
    """Trains the attention network with Adagrad on clips drawn from `sequences`.

    Returns:
        List[float]: Mean loss per epoch.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    optimizer = torch.optim.Adagrad(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in tqdm(range(cfg.epochs), desc="attention", disable=log is None):
        pairs = sample_clips(sequences, cfg, rng)
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            clips = torch.stack([clip for clip, _ in batch])
            masks = torch.stack([mask for _, mask in batch])
            losses.append(attention_training_step(model, clips, masks, optimizer))
        history.append(float(np.mean(losses)))
        if log:
            log.info("Attention epoch %i: loss %.4f", epoch + 1, history[-1])
    model.eval()
    return history
