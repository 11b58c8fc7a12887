import copy
import logging
import math
import threading
import warnings
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import Ridge
from sklearn.preprocessing import StandardScaler
from torch import nn
from torchvision.ops import roi_align
from tqdm import tqdm

from .attention import CBAM
from .backbone import Backbone
from .box import BoundingBox, as_box_array, clip_boxes, overlap_ratio
from .config import Settings, TrackerConfig
from .datanet import (
    ClipInput,
    DaTANet,
    GlobalProposals,
    crop_template,
    rank_by_attention,
    sample_global_proposals,
)
from .errors import BoxError
from .frame import FramePair, ImageTensor, Modality
from .mfgnet import DynamicFilterSet, MFGNet
from .sampling import draw_training_samples, sample_gaussian, sample_grid, select_hard_negatives


def roi_instance_features(
    features: torch.Tensor,
    boxes,
    grid: int = 3,
    spatial_scale: float = 1 / 8,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinear RoI alignment of image-space boxes onto a grid x grid bin layout.

    Args:
        features (torch.Tensor): Cxhxw fused feature map.
        boxes: Boxes as x, y, w, h rows in image pixels.
        spatial_scale (float): Feature cells per image pixel.

    Returns:
        torch.Tensor: Nx(C*grid*grid) flattened instance features.
    """
    arr = as_box_array(boxes)
    if np.any(arr[:, 2] * spatial_scale <= 0) or np.any(arr[:, 3] * spatial_scale <= 0):
        raise BoxError("RoI projects to a zero-area region on the feature map")
    rois = torch.as_tensor(arr, dtype=features.dtype, device=features.device)
    rois = torch.cat([rois[:, :2], rois[:, :2] + rois[:, 2:]], dim=1)
    pooled = roi_align(
        features.unsqueeze(0),
        [rois],
        output_size=grid,
        spatial_scale=spatial_scale,
        sampling_ratio=sampling_ratio,
        aligned=True,
    )
    return pooled.flatten(1)


class ProposalSource(Enum):
    Local = "local"
    Global = "global"


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    score: float
    source: ProposalSource
    # Row of the proposal in the scored batch
    index: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"Proposal score must be finite, got {self.score}")


def select_proposal(boxes, scores: torch.Tensor, source: ProposalSource) -> Optional[Proposal]:
    """The highest-scoring proposal, ignoring non-finite scores. None if no score is finite."""
    finite = torch.isfinite(scores)
    if not bool(finite.any()):
        return None
    index = int(torch.where(finite, scores, scores.new_tensor(-math.inf)).argmax())
    return Proposal(BoundingBox.from_array(as_box_array(boxes)[index]), float(scores[index]), source, index)


def target_score(logits: torch.Tensor) -> torch.Tensor:
    """Foreground minus background logit; positive iff the foreground probability exceeds 0.5."""
    return logits[..., 1] - logits[..., 0]


class InstanceHead(nn.Module):
    """Two shared fully connected layers and one binary output layer per domain."""

    def __init__(self, in_features: int, hidden: int = 512, domains: int = 1, dropout: float = 0.5):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
        )
        self.hidden = hidden
        self.branches = nn.ModuleList()
        self.reset_branches(domains)

    def reset_branches(self, domains: int):
        """Replaces the output layers with `domains` freshly initialized ones."""
        branches = []
        for _ in range(domains):
            branch = nn.Linear(self.hidden, 2)
            nn.init.normal_(branch.weight, std=0.01)
            nn.init.zeros_(branch.bias)
            branches.append(branch)
        self.branches = nn.ModuleList(branches)

    @property
    def domains(self) -> int:
        return len(self.branches)

    def forward(self, feats: torch.Tensor, domain: Optional[int] = None) -> torch.Tensor:
        """Nx2 logits of one domain, or NxDx2 logits of all domains when `domain` is None."""
        shared = self.shared(feats)
        if domain is not None:
            return self.branches[domain](shared)
        return torch.stack([branch(shared) for branch in self.branches], dim=1)

    def classify(self, feats: torch.Tensor) -> torch.Tensor:
        """Nx2 (background, foreground) logits of the tracking-time head."""
        return self(feats, domain=0)


def _detached(value):
    return value.detach() if isinstance(value, torch.Tensor) else value


@dataclass
class LossBreakdown:
    cls: Union[torch.Tensor, float]
    inst: Union[torch.Tensor, float]
    total: Union[torch.Tensor, float]

    def item(self) -> "LossBreakdown":
        return LossBreakdown(*(float(_detached(v)) for v in (self.cls, self.inst, self.total)))


def loss_cls(
    logits: torch.Tensor, labels: torch.Tensor, class_weight: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Mean binary cross-entropy of softmax-normalized Nx2 logits.

    With a (background, foreground) `class_weight` the mean is weighted per sample by
    the weight of its label.
    """
    if logits.shape[0] == 0:
        raise ValueError("Classification loss needs at least one sample")
    if class_weight is not None:
        class_weight = class_weight.to(logits.dtype)
    return F.cross_entropy(logits, labels.long(), weight=class_weight)


def loss_inst(pos_scores: torch.Tensor, domain_id: int) -> torch.Tensor:
    """Instance embedding loss: softmax over domains of the positives' foreground scores.

    Args:
        pos_scores (torch.Tensor): NxD foreground scores of positives under every domain head.
        domain_id (int): Domain the positives belong to.
    """
    if pos_scores.shape[0] == 0:
        raise ValueError("Instance loss needs at least one positive")
    if pos_scores.shape[1] < 2:
        warnings.warn("Instance loss over fewer than two domains is constant")
    target = torch.full((pos_scores.shape[0],), domain_id, dtype=torch.long)
    return F.cross_entropy(pos_scores, target)


def loss_total(cls, inst, alpha: float = 0.1) -> LossBreakdown:
    return LossBreakdown(cls, inst, cls + alpha * inst)


def _encode_deltas(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    centers = boxes[:, :2] + boxes[:, 2:] / 2
    gt_centers = gt[:, :2] + gt[:, 2:] / 2
    return np.concatenate(
        [(gt_centers - centers) / boxes[:, 2:], np.log(gt[:, 2:] / boxes[:, 2:])], axis=1
    )


def _apply_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    centers = boxes[:, :2] + boxes[:, 2:] / 2 + deltas[:, :2] * boxes[:, 2:]
    sizes = boxes[:, 2:] * np.exp(deltas[:, 2:])
    return np.concatenate([centers - sizes / 2, sizes], axis=1)


class BBoxRegressor:
    """Linear refinement of (dx, dy, dlog w, dlog h) from instance features."""

    def __init__(self, alpha: float = 1000.0):
        self.alpha = alpha
        self.weights: Optional[np.ndarray] = None
        self.bias: Optional[np.ndarray] = None

    @staticmethod
    def from_weights(weights: np.ndarray, bias: Optional[np.ndarray] = None):
        regressor = BBoxRegressor()
        regressor.weights = np.asarray(weights, dtype=np.float64)
        regressor.bias = np.zeros(4) if bias is None else np.asarray(bias, dtype=np.float64)
        return regressor

    @property
    def trained(self) -> bool:
        return self.weights is not None

    def fit(self, feats: torch.Tensor, boxes, gt: BoundingBox):
        x = feats.detach().cpu().double().numpy()
        arr = as_box_array(boxes)
        y = _encode_deltas(arr, np.repeat(gt.to_array()[None], len(arr), axis=0))
        model = Ridge(alpha=self.alpha).fit(x, y)
        self.weights, self.bias = model.coef_.T, model.intercept_
        return self

    def predict(
        self,
        feats: torch.Tensor,
        boxes,
        image_size: Optional[Tuple[int, int]] = None,
        log: Optional[logging.Logger] = None,
    ) -> np.ndarray:
        arr = as_box_array(boxes)
        if not self.trained:
            if log:
                log.warning("Bounding box regressor is untrained, keeping boxes unchanged")
            refined = arr
        else:
            x = feats.detach().cpu().double().numpy()
            refined = _apply_deltas(arr, x @ self.weights + self.bias)
        return clip_boxes(refined, image_size) if image_size is not None else refined


def regress_box(
    regressor: BBoxRegressor,
    feat: torch.Tensor,
    box: BoundingBox,
    image_size: Optional[Tuple[int, int]] = None,
    log: Optional[logging.Logger] = None,
) -> BoundingBox:
    return BoundingBox.from_array(regressor.predict(feat.reshape(1, -1), box, image_size, log)[0])


class MFGTrackNet(nn.Module):
    """Backbone, per-modality CBAM, MFGNet fusion and the instance head."""

    def __init__(self, settings: Optional[Settings] = None, domains: int = 1):
        super().__init__()
        settings = settings or Settings()
        channels = settings.backbone.channels
        self.settings = settings
        self.backbone = Backbone(settings.backbone)
        self.cbam = (
            nn.ModuleDict(
                {
                    modality.value: CBAM(channels, settings.cbam)
                    for modality in (Modality.Visible, Modality.Thermal)
                }
            )
            if settings.cbam.enabled
            else None
        )
        self.mfgnet = MFGNet(channels, settings.mfgnet)
        self.head = InstanceHead(
            2 * channels * settings.tracker.roi_grid ** 2,
            settings.tracker.hidden,
            domains,
            settings.tracker.dropout,
        )

    def refined_features(self, pair: FramePair) -> Tuple[torch.Tensor, torch.Tensor]:
        visible, thermal = self.backbone.encode_pair(pair)
        if self.cbam is not None:
            visible = self.cbam[Modality.Visible.value](visible)
            thermal = self.cbam[Modality.Thermal.value](thermal)
        return visible, thermal

    def fused_features(self, pair: FramePair) -> torch.Tensor:
        """2Cx(H/8)x(W/8) fused features of a frame pair whose sides are multiples of 8."""
        return self.mfgnet(*self.refined_features(pair))

    def fusion_filters(self, pair: FramePair) -> Optional[Tuple[DynamicFilterSet, DynamicFilterSet]]:
        """(z_v, z_t) predicted for a frame pair, None when dynamic fusion is off."""
        if self.mfgnet.mode == "off":
            return None
        return self.mfgnet.generate_filters(torch.cat(self.refined_features(pair), dim=-3))


@dataclass(frozen=True)
class FrameGeometry:
    """Maps image pixels to the encoder input: rescale, then pad to a multiple of 8."""

    scale: float
    image_size: Tuple[int, int]

    @staticmethod
    def fit(
        image_size: Tuple[int, int],
        max_side: int,
        target: Optional[BoundingBox] = None,
        target_side: int = 0,
    ) -> "FrameGeometry":
        """Scale that brings `target` to `target_side` encoder pixels, bounded so the longer
        frame side stays within `max_side`. Without a target, frames are only downscaled."""
        bound = max_side / max(image_size)
        if target is None or target_side <= 0:
            return FrameGeometry(min(1.0, bound), image_size)
        return FrameGeometry(min(bound, target_side / math.sqrt(target.w * target.h)), image_size)

    def prepare(self, pair: FramePair) -> FramePair:
        height, width = self.image_size
        size = (max(1, round(height * self.scale)), max(1, round(width * self.scale)))
        pad_h, pad_w = -size[0] % Backbone.stride, -size[1] % Backbone.stride

        def convert(image: ImageTensor) -> ImageTensor:
            data = image.data
            if size != image.size:
                data = F.interpolate(data[None], size=size, mode="bilinear", align_corners=False)[0]
            return ImageTensor(F.pad(data, (0, pad_w, 0, pad_h)), image.modality)

        return FramePair(convert(pair.visible), convert(pair.thermal))

    @property
    def spatial_scale(self) -> float:
        return self.scale / Backbone.stride


@dataclass
class SampleBatch:
    pos: torch.Tensor
    neg: torch.Tensor


@dataclass
class TrackerState:
    current_box: BoundingBox
    frame_index: int = 0
    failure_streak: int = 0
    short_term_store: Deque[SampleBatch] = field(default_factory=lambda: deque(maxlen=20))
    long_term_store: Deque[SampleBatch] = field(default_factory=lambda: deque(maxlen=100))
    regressor: BBoxRegressor = field(default_factory=BBoxRegressor)
    # Local translation spread, widened while the tracker fails
    sigma_xy: float = 0.3


@dataclass
class FrameResult:
    box: BoundingBox
    score: float
    state: TrackerState
    used_global: bool = False
    # "scheduled", "failure" or None
    update: Optional[str] = None
    uniform_fallback: bool = False


@dataclass(frozen=True)
class SearchPolicy:
    failure_threshold: int = 8
    update_interval: int = 10

    def use_global(self, failure_streak: int) -> bool:
        return failure_streak >= self.failure_threshold

    def next_streak(self, failure_streak: int, score: float) -> int:
        return 0 if score > 0 else failure_streak + 1

    def update_kind(self, frame_index: int, success: bool) -> Optional[str]:
        if not success:
            return "failure"
        if frame_index % self.update_interval == 0:
            return "scheduled"
        return None


@dataclass(frozen=True)
class StepLoss:
    """Minibatch loss of one head update, before and after its SGD step."""

    before: float
    after: float

    @property
    def descended(self) -> bool:
        return self.after <= self.before


class Tracker:
    """Tracking-by-detection over fused RGB-T features with an optional global switch.

    A tracker owns one TrackerState at a time; `track_frame` and `online_update` hold
    an internal lock and must not be interleaved on the same state.
    """

    def __init__(
        self,
        settings: Optional[Settings] = None,
        net: Optional[MFGTrackNet] = None,
        datanet: Optional[DaTANet] = None,
        log: Optional[logging.Logger] = None,
    ):
        settings = settings or Settings()
        self.settings = settings
        self.cfg: TrackerConfig = settings.tracker
        torch.manual_seed(self.cfg.seed)
        # The head is finetuned per sequence, so the offline network is never mutated
        self.net = copy.deepcopy(net) if net is not None else MFGTrackNet(settings)
        self.net.eval()
        self.datanet = datanet.eval() if datanet is not None else None
        self.log = log
        self.policy = SearchPolicy(self.cfg.failure_threshold, self.cfg.update_interval)
        self.rng = np.random.default_rng(self.cfg.seed)
        self._lock = threading.Lock()
        self._geometry: Optional[FrameGeometry] = None
        self._template: Optional[FramePair] = None
        self._recent: Deque[FramePair] = deque(maxlen=settings.datanet.clip_len)
        self._optimizer: Optional[torch.optim.Optimizer] = None
        self._scaler: Optional[StandardScaler] = None

    @property
    def global_enabled(self) -> bool:
        return self.cfg.global_search and self.datanet is not None

    @torch.no_grad()
    def features(self, pair: FramePair) -> torch.Tensor:
        if self._geometry is None or self._geometry.image_size != pair.size:
            self._geometry = FrameGeometry.fit(pair.size, self.settings.backbone.input_size)
        return self.net.fused_features(self._geometry.prepare(pair))

    @torch.no_grad()
    def fusion_filters(
        self, pair: FramePair, box: BoundingBox
    ) -> Optional[Tuple[DynamicFilterSet, DynamicFilterSet]]:
        """Filter banks predicted for a frame at the scale `initialize` would pick for `box`."""
        geometry = FrameGeometry.fit(
            pair.size, self.settings.backbone.input_size, box, self.cfg.target_side
        )
        return self.net.fusion_filters(geometry.prepare(pair))

    def instance_features(self, features: torch.Tensor, boxes) -> torch.Tensor:
        """RoI features of `boxes`, standardized once a first frame has been seen."""
        assert self._geometry is not None
        feats = roi_instance_features(
            features,
            boxes,
            self.cfg.roi_grid,
            self._geometry.spatial_scale,
            self.cfg.roi_sampling,
        )
        return self.standardize(feats)

    def standardize(self, feats: torch.Tensor) -> torch.Tensor:
        if self._scaler is None:
            return feats
        return torch.from_numpy(self._scaler.transform(feats.detach().cpu().numpy())).to(feats)

    @torch.no_grad()
    def score(self, feats: torch.Tensor) -> torch.Tensor:
        """Target scores of instance features under the tracking-time head."""
        self.net.head.eval()
        return target_score(self.net.head.classify(feats))

    def _make_optimizer(self, lr: float) -> torch.optim.Optimizer:
        head = self.net.head
        return torch.optim.SGD(
            [
                {"params": head.shared.parameters()},
                {"params": head.branches.parameters(), "lr": lr * self.cfg.head_lr_mult},
            ],
            lr=lr,
            momentum=self.cfg.momentum,
            weight_decay=self.cfg.weight_decay,
        )

    def train_head(
        self,
        pos: torch.Tensor,
        neg: torch.Tensor,
        iterations: int,
        optimizer: torch.optim.Optimizer,
    ) -> List[StepLoss]:
        """SGD on loss_cls over `n_pos` positives and the `n_neg` hardest of up to
        `hard_pool` negatives per iteration.

        With `balanced` set, each class carries half of the minibatch loss. The loss after
        a step is measured under the same dropout mask as the step itself.

        Returns:
            List[StepLoss]: The minibatch loss before and after each step.
        """
        head = self.net.head
        history = []
        for _ in range(iterations):
            pos_idx = self.rng.choice(len(pos), self.cfg.n_pos, replace=len(pos) < self.cfg.n_pos)
            pool = self.rng.choice(len(neg), min(self.cfg.hard_pool, len(neg)), replace=False)
            candidates = neg[torch.from_numpy(pool)]
            hard = candidates[select_hard_negatives(self.score(candidates), self.cfg.n_neg)]
            batch = torch.cat([pos[torch.from_numpy(pos_idx)], hard])
            labels = torch.cat([torch.ones(len(pos_idx)), torch.zeros(len(hard))])
            weight = torch.tensor([1 / len(hard), 1 / len(pos_idx)]) if self.cfg.balanced else None
            head.train()
            dropout_state = torch.get_rng_state()
            loss = loss_cls(head.classify(batch), labels, weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            torch.set_rng_state(dropout_state)
            with torch.no_grad():
                after = loss_cls(head.classify(batch), labels, weight)
            head.eval()
            history.append(StepLoss(float(loss.detach()), float(after)))
        return history

    def separation(self, pos: torch.Tensor, neg: torch.Tensor) -> Tuple[float, float]:
        """Fractions of positives scored above 0 and of negatives scored below 0."""
        return (
            float((self.score(pos) > 0).float().mean()),
            float((self.score(neg) < 0).float().mean()),
        )

    def _finetune(self, pos: torch.Tensor, neg: torch.Tensor) -> List[StepLoss]:
        cfg = self.cfg
        optimizer = self._make_optimizer(cfg.init_lr)
        history = self.train_head(pos, neg, cfg.init_iters, optimizer)
        pos_rate, neg_rate = self.separation(pos, neg)
        while min(pos_rate, neg_rate) < cfg.init_accuracy and len(history) < cfg.init_max_iters:
            steps = min(10, cfg.init_max_iters - len(history))
            history += self.train_head(pos, neg, steps, optimizer)
            pos_rate, neg_rate = self.separation(pos, neg)
        if self.log:
            converged = min(pos_rate, neg_rate) >= cfg.init_accuracy
            self.log.log(
                logging.INFO if converged else logging.WARNING,
                "First frame finetuning: %i steps, loss %.4f, "
                "%.0f%% of positives and %.0f%% of negatives separated",
                len(history),
                history[-1].after if history else math.nan,
                100 * pos_rate,
                100 * neg_rate,
            )
        return history

    def initialize(self, pair: FramePair, box: BoundingBox) -> TrackerState:
        """First-frame finetuning of a fresh head and fit of the box regressor.

        Frames of the sequence are rescaled so the target spans `target_side` encoder
        pixels, and instance features are standardized with the statistics of the
        first-frame samples.
        """
        with self._lock:
            cfg = self.cfg
            torch.manual_seed(cfg.seed)
            self.net.head.reset_branches(1)
            self._geometry = FrameGeometry.fit(
                pair.size, self.settings.backbone.input_size, box, cfg.target_side
            )
            self._scaler = None
            features = self.features(pair)
            samples = draw_training_samples(
                box, pair.size, cfg.n_init_pos, cfg.n_init_neg, cfg.pos_iou, cfg.neg_iou,
                self.rng, self.log,
            )
            pos = self.instance_features(features, samples.positives)
            neg = self.instance_features(features, samples.negatives)
            self._scaler = StandardScaler().fit(torch.cat([pos, neg]).numpy())
            pos, neg = self.standardize(pos), self.standardize(neg)
            self._finetune(pos, neg)

            candidates = sample_gaussian(
                box, 2 * cfg.bbreg_samples, pair.size, 0.3, 1.5, self.rng
            )
            candidates = candidates[overlap_ratio(candidates, box) >= 0.6][: cfg.bbreg_samples]
            regressor = BBoxRegressor(cfg.bbreg_alpha)
            if len(candidates):
                regressor.fit(self.instance_features(features, candidates), candidates, box)

            state = TrackerState(
                current_box=box,
                short_term_store=deque(maxlen=cfg.short_term),
                long_term_store=deque(maxlen=cfg.long_term),
                regressor=regressor,
                sigma_xy=cfg.sigma_xy,
            )
            stored = SampleBatch(pos[: cfg.n_store_pos], neg[: cfg.n_store_neg])
            state.short_term_store.append(stored)
            state.long_term_store.append(stored)
            self._optimizer = self._make_optimizer(cfg.lr)
            self._template = crop_template(pair, box, self.settings.datanet.input_size)
            self._recent.clear()
            self._recent.append(pair)
            return state

    def _global_proposals(self, state: TrackerState, pair: FramePair) -> GlobalProposals:
        """Boxes on the attention peaks, plus the grid positions holding the most attention."""
        assert self.datanet is not None and self._template is not None
        frames = list(self._recent)
        frames = [frames[0]] * (self.datanet.clip_len - len(frames)) + frames
        clip = ClipInput.build(frames, self._template, self.datanet.input_size)
        att = self.datanet.predict(clip).resized(pair.size)
        proposals = sample_global_proposals(
            att, self.cfg.n_global, state.current_box, self.settings.datanet, self.rng, self.log
        )
        if self.cfg.global_stride > 0 and not proposals.uniform_fallback:
            grid = sample_grid(state.current_box, pair.size, self.cfg.global_stride)
            ranked = rank_by_attention(att, grid, self.cfg.n_global)
            proposals = GlobalProposals(np.concatenate([proposals.boxes, ranked]))
        return proposals

    def track_frame(self, state: TrackerState, pair: FramePair) -> FrameResult:
        """Locates the target in the next frame and updates `state` in place."""
        with self._lock:
            cfg = self.cfg
            state.frame_index += 1
            self._recent.append(pair)
            features = self.features(pair)
            used_global = self.global_enabled and self.policy.use_global(state.failure_streak)
            fallback = False
            if used_global:
                proposals = self._global_proposals(state, pair)
                boxes, fallback = proposals.boxes, proposals.uniform_fallback
                if self.log:
                    self.log.info(
                        "Frame %i: global search after %i failures",
                        state.frame_index,
                        state.failure_streak,
                    )
            else:
                boxes = sample_gaussian(
                    state.current_box, cfg.n_local, pair.size, state.sigma_xy, cfg.scale_steps,
                    self.rng,
                )
            feats = self.instance_features(features, boxes)
            scores = self.score(feats)
            source = ProposalSource.Global if used_global else ProposalSource.Local
            best = select_proposal(boxes, scores, source)
            if best is None:
                box, score = state.current_box, -math.inf
            else:
                box, score = best.box, best.score
            success = score > 0
            if success:
                box = regress_box(state.regressor, feats[best.index], box, pair.size, self.log)
                state.sigma_xy = cfg.sigma_xy
                if used_global and self.log:
                    self.log.info("Frame %i: target re-acquired, back to local search", state.frame_index)
            else:
                state.sigma_xy = min(state.sigma_xy * cfg.trans_expand, max(cfg.trans_limit, cfg.sigma_xy))
            state.failure_streak = self.policy.next_streak(state.failure_streak, score)
            state.current_box = box
            if success:
                samples = draw_training_samples(
                    box, pair.size, cfg.n_store_pos, cfg.n_store_neg, cfg.pos_iou, cfg.neg_iou,
                    self.rng,
                )
                batch = SampleBatch(
                    self.instance_features(features, samples.positives),
                    self.instance_features(features, samples.negatives),
                )
                state.short_term_store.append(batch)
                state.long_term_store.append(batch)
            update = self.policy.update_kind(state.frame_index, success)
            if update is not None:
                self._online_update(state, update)
            return FrameResult(box, score, state, used_global, update, fallback)

    def online_update(self, state: TrackerState, kind: str = "scheduled") -> List[StepLoss]:
        with self._lock:
            return self._online_update(state, kind)

    def _online_update(self, state: TrackerState, kind: str) -> List[StepLoss]:
        """Long-term positives for scheduled updates, short-term ones after failures;
        negatives always come from the short-term store."""
        pos_store = state.long_term_store if kind == "scheduled" else state.short_term_store
        if not pos_store or not state.short_term_store:
            if self.log:
                self.log.warning("Frame %i: sample store is empty, skipping %s update", state.frame_index, kind)
            return []
        pos = torch.cat([batch.pos for batch in pos_store])
        neg = torch.cat([batch.neg for batch in state.short_term_store])
        if len(pos) == 0 or len(neg) == 0:
            if self.log:
                self.log.warning("Frame %i: no samples to learn from, skipping %s update", state.frame_index, kind)
            return []
        if self._optimizer is None:
            self._optimizer = self._make_optimizer(self.cfg.lr)
        losses = self.train_head(pos, neg, self.cfg.update_iters, self._optimizer)
        if self.log:
            self.log.info("Frame %i: %s update, loss %.4f", state.frame_index, kind, losses[-1].after)
        return losses

    def track(self, frames: Sequence[FramePair], init_box: BoundingBox) -> List[FrameResult]:
        """Tracks a whole sequence; the first result is the given box."""
        state = self.initialize(frames[0], init_box)
        results = [FrameResult(init_box, math.inf, state)]
        for pair in tqdm(frames[1:], desc="track", disable=self.log is None):
            results.append(self.track_frame(state, pair))
        return results

    def save_head(self, path: Union[str, Path], state: Optional[TrackerState] = None):
        payload = {f"head.{k}": v for k, v in self.net.head.state_dict().items()}
        if state is not None and state.regressor.trained:
            payload["regressor.weights"] = torch.from_numpy(state.regressor.weights)
            payload["regressor.bias"] = torch.from_numpy(state.regressor.bias)
        if self._scaler is not None:
            payload["scaler.mean"] = torch.from_numpy(self._scaler.mean_)
            payload["scaler.scale"] = torch.from_numpy(self._scaler.scale_)
        torch.save(payload, path)

    def load_head(self, path: Union[str, Path]) -> BBoxRegressor:
        payload = torch.load(path)
        head = {k[len("head.") :]: v for k, v in payload.items() if k.startswith("head.")}
        domains = len({k.split(".")[1] for k in head if k.startswith("branches.")})
        self.net.head.reset_branches(domains)
        self.net.head.load_state_dict(head)
        if "scaler.mean" in payload:
            self._scaler = _fitted_scaler(
                payload["scaler.mean"].numpy(), payload["scaler.scale"].numpy()
            )
        if "regressor.weights" in payload:
            return BBoxRegressor.from_weights(
                payload["regressor.weights"].numpy(), payload["regressor.bias"].numpy()
            )
        return BBoxRegressor()


def _fitted_scaler(mean: np.ndarray, scale: np.ndarray) -> StandardScaler:
    scaler = StandardScaler()
    scaler.mean_, scaler.scale_, scaler.var_ = mean, scale, scale ** 2
    scaler.n_features_in_ = len(mean)
    return scaler


def train_tracker(
    net: MFGTrackNet,
    sequences: Sequence,
    settings: Optional[Settings] = None,
    log: Optional[logging.Logger] = None,
) -> List[LossBreakdown]:
    """Multi-domain offline training: one output branch per sequence, shared everything else.

    Returns:
        List[LossBreakdown]: Per-iteration losses.
    """
    settings = settings or Settings()
    cfg, tcfg = settings.train, settings.tracker
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net.head.reset_branches(len(sequences))
    optimizer = torch.optim.SGD(
        net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    history = []
    net.train()
    for iteration in tqdm(range(cfg.iterations), desc="train", disable=log is None):
        domain = iteration % len(sequences)
        record = sequences[domain]
        t = int(rng.integers(len(record.frames)))
        pair, gt = record.frames[t], record.boxes[t]
        geometry = FrameGeometry.fit(pair.size, settings.backbone.input_size, gt, tcfg.target_side)
        features = net.fused_features(geometry.prepare(pair))
        samples = draw_training_samples(
            gt, pair.size, tcfg.n_pos, tcfg.n_neg, tcfg.pos_iou, tcfg.neg_iou, rng
        )
        boxes = np.concatenate([samples.positives, samples.negatives])
        feats = roi_instance_features(
            features, boxes, tcfg.roi_grid, geometry.spatial_scale, tcfg.roi_sampling
        )
        logits = net.head(feats)
        labels = torch.cat([torch.ones(len(samples.positives)), torch.zeros(len(samples.negatives))])
        cls = loss_cls(logits[:, domain], labels)
        inst = (
            loss_inst(logits[: len(samples.positives), :, 1], domain)
            if net.head.domains > 1
            else logits.new_zeros(())
        )
        losses = loss_total(cls, inst, cfg.alpha)
        optimizer.zero_grad()
        losses.total.backward()
        optimizer.step()
        history.append(losses.item())
        if log and (iteration + 1) % 50 == 0:
            log.info(
                "Iteration %i: cls %.4f inst %.4f total %.4f",
                iteration + 1,
                history[-1].cls,
                history[-1].inst,
                history[-1].total,
            )
    net.eval()
    return history
