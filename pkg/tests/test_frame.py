import numpy as np
import pytest
import torch

from mfgtrack.errors import ShapeError
from mfgtrack.frame import FramePair, ImageTensor, Modality, gray_as_thermal


def test_gray_is_replicated():
    image = ImageTensor.from_gray(torch.rand(8, 16))
    assert image.size == (8, 16)
    assert torch.equal(image.data[0], image.data[2])
    assert image.modality == Modality.Thermal


def test_numpy_round_trip():
    array = np.random.default_rng(0).integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
    image = ImageTensor.from_numpy(array, Modality.Visible)
    np.testing.assert_array_equal(image.to_numpy(), array)


def test_gray_as_thermal_uses_luminance():
    visible = ImageTensor(torch.stack([torch.ones(4, 4), torch.zeros(4, 4), torch.zeros(4, 4)]), Modality.Visible)
    thermal = gray_as_thermal(visible)
    assert thermal.modality == Modality.Thermal
    torch.testing.assert_close(thermal.data, torch.full((3, 4, 4), 0.299))


def test_pair_size_mismatch():
    pair = FramePair(
        ImageTensor(torch.zeros(3, 8, 8), Modality.Visible),
        ImageTensor(torch.zeros(3, 8, 16), Modality.Thermal),
    )
    with pytest.raises(ShapeError):
        pair.stacked()
    with pytest.raises(ShapeError):
        ImageTensor(torch.zeros(1, 8, 8), Modality.Visible)
