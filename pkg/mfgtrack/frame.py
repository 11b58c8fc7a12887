from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
import torch

from .errors import ShapeError


class Modality(Enum):
    Visible = "visible"
    Thermal = "thermal"


@dataclass(frozen=True)
class ImageTensor:
    # 3xHxW tensor with values in [0, 1]
    data: torch.Tensor
    modality: Modality

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeError(
                f"{self.modality.value} image must be 3xHxW, got {tuple(self.data.shape)}"
            )

    @property
    def size(self) -> Tuple[int, int]:
        return (int(self.data.shape[1]), int(self.data.shape[2]))

    @staticmethod
    def from_gray(gray: torch.Tensor, modality: Modality = Modality.Thermal):
        """Replicates a single HxW (or 1xHxW) channel so one encoder serves both modalities."""
        if gray.ndim == 3:
            gray = gray[0]
        if gray.ndim != 2:
            raise ShapeError(f"Gray image must be HxW, got {tuple(gray.shape)}")
        return ImageTensor(gray.unsqueeze(0).expand(3, -1, -1).contiguous(), modality)

    @staticmethod
    def from_numpy(array: np.ndarray, modality: Modality):
        """Builds an image from an HxWx3 or HxW array in [0, 1] or uint8."""
        data = np.asarray(array)
        if data.dtype == np.uint8:
            data = data.astype(np.float32) / 255.0
        tensor = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
        if tensor.ndim == 2:
            return ImageTensor.from_gray(tensor, modality)
        return ImageTensor(tensor.permute(2, 0, 1).contiguous(), modality)

    def to_numpy(self) -> np.ndarray:
        """HxWx3 uint8 copy for image export."""
        data = self.data.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
        return (data * 255).round().astype(np.uint8)


@dataclass(frozen=True)
class FramePair:
    visible: ImageTensor
    thermal: ImageTensor

    @property
    def size(self) -> Tuple[int, int]:
        if self.visible.size != self.thermal.size:
            raise ShapeError(
                f"Visible {self.visible.size} and thermal {self.thermal.size} sizes differ"
            )
        return self.visible.size

    def stacked(self) -> torch.Tensor:
        """2x3xHxW batch with the visible image first. Raises on mismatched sizes."""
        if self.visible.size != self.thermal.size:
            raise ShapeError(
                f"Visible {self.visible.size} and thermal {self.thermal.size} sizes differ"
            )
        return torch.stack([self.visible.data, self.thermal.data])


def gray_as_thermal(visible: ImageTensor) -> ImageTensor:
    """Stands a luminance copy of a visible image in for a missing thermal image."""
    r, g, b = visible.data
    return ImageTensor.from_gray(0.299 * r + 0.587 * g + 0.114 * b)
