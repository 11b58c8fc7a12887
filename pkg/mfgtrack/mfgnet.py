from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import MFGNetConfig
from .errors import ShapeError
from .frame import Modality


@dataclass(frozen=True)
class DynamicFilterSet:
    # BxCxsxs (or Cxsxs), one s x s kernel per channel
    kernels: torch.Tensor
    # None marks the single bank shared by both modalities
    modality: Optional[Modality] = None

    def __post_init__(self):
        if self.kernels.ndim not in (3, 4):
            raise ShapeError(f"Kernels must be CxSxS or BxCxSxS, got {tuple(self.kernels.shape)}")
        s = self.kernels.shape[-1]
        if self.kernels.shape[-2] != s:
            raise ShapeError(f"Kernels must be square, got {tuple(self.kernels.shape[-2:])}")
        if s % 2 == 0:
            raise ShapeError(f"Kernel size must be odd, got {s}")

    @property
    def size(self) -> int:
        return int(self.kernels.shape[-1])

    @property
    def channels(self) -> int:
        return int(self.kernels.shape[-3])


@dataclass(frozen=True)
class KeyQueryFeatures:
    # BxCxhxw
    key: torch.Tensor
    # Bx(s*s)xhxw
    query: torch.Tensor


def kernel_product(key: torch.Tensor, query: torch.Tensor, size: int) -> torch.Tensor:
    """Multiplies the reshaped key (C x hw) with the reshaped query (hw x s*s).

    Returns:
        torch.Tensor: BxCxsxs kernels.
    """
    if key.shape[-2:] != query.shape[-2:]:
        raise ShapeError(
            f"Key {tuple(key.shape)} and query {tuple(query.shape)} spatial sizes differ"
        )
    if query.shape[1] != size * size:
        raise ShapeError(f"Query needs {size * size} channels, got {query.shape[1]}")
    product = torch.bmm(key.flatten(2), query.flatten(2).transpose(1, 2))
    return product.view(key.shape[0], key.shape[1], size, size)


def dynamic_convolve(features: torch.Tensor, filters: DynamicFilterSet) -> torch.Tensor:
    """Depthwise convolution of each feature channel with its own predicted kernel.

    Follows the deep-learning convention (cross-correlation) and zero-pads so the
    spatial size is kept. Batched inputs use a grouped convolution over B*C groups.
    """
    batched = features.ndim == 4
    x = features if batched else features.unsqueeze(0)
    kernels = filters.kernels if filters.kernels.ndim == 4 else filters.kernels.unsqueeze(0)
    b, c, h, w = x.shape
    if kernels.shape[1] != c:
        raise ShapeError(f"{c} feature channels but {kernels.shape[1]} kernels")
    if kernels.shape[0] != b:
        if kernels.shape[0] != 1:
            raise ShapeError(f"{b} feature maps but {kernels.shape[0]} filter banks")
        kernels = kernels.expand(b, -1, -1, -1)
    s = filters.size
    out = F.conv2d(
        x.reshape(1, b * c, h, w),
        kernels.reshape(b * c, 1, s, s),
        padding=s // 2,
        groups=b * c,
    ).view(b, c, h, w)
    return out if batched else out[0]


def fuse(
    visible: torch.Tensor,
    thermal: torch.Tensor,
    z_v: DynamicFilterSet,
    z_t: DynamicFilterSet,
) -> torch.Tensor:
    """Residual dynamic convolution per modality, then channel concatenation."""
    if visible.shape != thermal.shape:
        raise ShapeError(
            f"Visible {tuple(visible.shape)} and thermal {tuple(thermal.shape)} features differ"
        )
    enhanced_v = dynamic_convolve(visible, z_v) + visible
    enhanced_t = dynamic_convolve(thermal, z_t) + thermal
    return torch.cat([enhanced_v, enhanced_t], dim=-3)


class FilterGenerator(nn.Module):
    """Key and query 1x1 transforms of the concatenated features, multiplied into kernels."""

    def __init__(self, channels: int, size: int, bias: bool = False, squash: bool = False):
        super().__init__()
        self.key = nn.Conv2d(2 * channels, channels, kernel_size=1, bias=bias)
        self.query = nn.Conv2d(2 * channels, size * size, kernel_size=1, bias=bias)
        for conv in (self.key, self.query):
            nn.init.normal_(conv.weight, std=0.01)
            if conv.bias is not None:
                nn.init.zeros_(conv.bias)
        self.size = size
        self.squash = squash

    def key_query(self, concat: torch.Tensor) -> KeyQueryFeatures:
        return KeyQueryFeatures(self.key(concat), self.query(concat))

    def forward(self, concat: torch.Tensor) -> torch.Tensor:
        kq = self.key_query(concat)
        kernels = kernel_product(kq.key, kq.query, self.size)
        return torch.tanh(kernels) if self.squash else kernels


class MFGNet(nn.Module):
    """Modality-aware filter generation with residual dynamic convolution.

    `mode` selects the variant:
        mfg:   two symmetric generators, one filter bank per modality
        naive: a single generator whose bank is applied to both modalities
        off:   no dynamic convolution, the output is the plain concatenation
    """

    def __init__(self, channels: int, cfg: MFGNetConfig = MFGNetConfig()):
        super().__init__()
        self.channels = channels
        self.mode = cfg.mode
        self.kernel_size = cfg.kernel_size
        if cfg.kernel_size % 2 == 0:
            raise ShapeError(f"Kernel size must be odd, got {cfg.kernel_size}")
        names = {"mfg": ("visible", "thermal"), "naive": ("shared",), "off": ()}[cfg.mode]
        self.generators = nn.ModuleDict(
            {
                name: FilterGenerator(channels, cfg.kernel_size, cfg.bias, cfg.squash)
                for name in names
            }
        )

    def generate_filters(
        self, concat: torch.Tensor
    ) -> Tuple[DynamicFilterSet, DynamicFilterSet]:
        """Predicts (z_v, z_t) from Bx2CxHxW (or 2CxHxW) concatenated features."""
        x = concat if concat.ndim == 4 else concat.unsqueeze(0)
        if x.shape[1] != 2 * self.channels:
            raise ShapeError(f"Expected {2 * self.channels} channels, got {x.shape[1]}")
        if self.mode == "off":
            raise ShapeError("Filter generation is disabled in mode 'off'")
        if self.mode == "naive":
            shared = self.generators["shared"](x)
            if concat.ndim == 3:
                shared = shared[0]
            return DynamicFilterSet(shared), DynamicFilterSet(shared)
        z_v = self.generators["visible"](x)
        z_t = self.generators["thermal"](x)
        if concat.ndim == 3:
            z_v, z_t = z_v[0], z_t[0]
        return (
            DynamicFilterSet(z_v, Modality.Visible),
            DynamicFilterSet(z_t, Modality.Thermal),
        )

    def forward(self, visible: torch.Tensor, thermal: torch.Tensor) -> torch.Tensor:
        concat = torch.cat([visible, thermal], dim=-3)
        if self.mode == "off":
            return concat
        z_v, z_t = self.generate_filters(concat)
        return fuse(visible, thermal, z_v, z_t)


def export_filters(z_v: DynamicFilterSet, z_t: DynamicFilterSet, path) -> None:
    """Saves a pair of filter banks as a flat tensor archive for visualization."""
    torch.save({"visible": z_v.kernels.detach().cpu(), "thermal": z_t.kernels.detach().cpu()}, path)
