import torch
from torch import nn

from .config import CBAMConfig
from .errors import ShapeError


def _batched(features: torch.Tensor) -> torch.Tensor:
    if features.ndim == 3:
        return features.unsqueeze(0)
    if features.ndim != 4:
        raise ShapeError(f"Expected CxHxW or BxCxHxW features, got {tuple(features.shape)}")
    return features


class CBAM(nn.Module):
    """Channel attention followed by spatial attention, both multiplicative sigmoid gates."""

    def __init__(self, channels: int, cfg: CBAMConfig = CBAMConfig()):
        super().__init__()
        hidden = max(channels // cfg.reduction, cfg.min_hidden)
        # Shared by the max- and average-pooled descriptors
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, channels),
        )
        self.conv = nn.Conv2d(
            2, 1, kernel_size=cfg.spatial_kernel, padding=cfg.spatial_kernel // 2, bias=False
        )
        self.channels = channels

    def channel_attention(self, features: torch.Tensor) -> torch.Tensor:
        """Per-channel weights in (0, 1), shaped BxC."""
        x = _batched(features)
        if x.shape[1] != self.channels:
            raise ShapeError(f"Expected {self.channels} channels, got {x.shape[1]}")
        flat = x.flatten(2)
        return torch.sigmoid(self.mlp(flat.amax(dim=2)) + self.mlp(flat.mean(dim=2)))

    def spatial_attention(self, features: torch.Tensor) -> torch.Tensor:
        """Per-pixel weights in (0, 1), shaped BxHxW."""
        x = _batched(features)
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))[:, 0]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = _batched(features)
        refined = x * self.channel_attention(x)[:, :, None, None]
        out = refined * self.spatial_attention(refined)[:, None]
        return out if features.ndim == 4 else out[0]

    def apply_cbam(self, features: torch.Tensor) -> torch.Tensor:
        """Same as calling the module; named for symmetry with the two attention maps."""
        return self(features)
