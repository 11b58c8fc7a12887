from typing import Tuple

import torch
from torch import nn

from .config import BackboneConfig
from .errors import ShapeError
from .frame import FramePair, ImageTensor


class Backbone(nn.Module):
    """Three convolutional layers mapping 3xHxW images to Cx(H/8)x(W/8) features.

    Layer schedule, for output width C:
        conv1 7x7 stride 2 (C/4) -> ReLU -> max pool 2x2
        conv2 5x5 stride 2 (C/2) -> ReLU
        conv3 3x3 stride 1 (C)   -> ReLU
    """

    stride = 8

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        channels = cfg.channels
        self.channels = channels
        self.layers = nn.Sequential(
            nn.Conv2d(3, channels // 4, kernel_size=7, stride=2, padding=3),
            nn.ReLU(),
            nn.MaxPool2d(kernel_size=2, stride=2),
            nn.Conv2d(channels // 4, channels // 2, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(channels // 2, channels, kernel_size=3, stride=1, padding=1),
            nn.ReLU(),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected a Bx3xHxW batch, got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height % self.stride or width % self.stride:
            raise ShapeError(
                f"Image size {height}x{width} is not divisible by {self.stride}"
            )
        return self.layers(images)

    def encode(self, img: ImageTensor) -> torch.Tensor:
        """Encodes a single image into a Cx(H/8)x(W/8) feature map."""
        return self(img.data.unsqueeze(0))[0]

    def encode_pair(self, pair: FramePair) -> Tuple[torch.Tensor, torch.Tensor]:
        """Encodes both modalities with the same weights.

        Returns:
            Tuple[torch.Tensor, torch.Tensor]: (F_v, F_t), each Cx(H/8)x(W/8).
        """
        if pair.visible.size != pair.thermal.size:
            raise ShapeError(
                f"Visible {pair.visible.size} and thermal {pair.thermal.size} sizes differ"
            )
        return self.encode(pair.visible), self.encode(pair.thermal)
