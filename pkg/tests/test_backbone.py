import pytest
import torch
from torch.func import functional_call

from mfgtrack.backbone import Backbone
from mfgtrack.config import BackboneConfig
from mfgtrack.errors import ShapeError
from mfgtrack.frame import FramePair, ImageTensor, Modality


def _image(seed: int, size=(96, 96), modality=Modality.Visible):
    torch.manual_seed(seed)
    return ImageTensor(torch.rand(3, *size), modality)


def test_encode_shape():
    backbone = Backbone()
    features = backbone.encode(_image(0))
    assert features.shape == (512, 12, 12)
    assert torch.isfinite(features).all()


def test_zero_image():
    features = Backbone().encode(ImageTensor(torch.zeros(3, 64, 32), Modality.Thermal))
    assert features.shape == (512, 8, 4)
    assert torch.isfinite(features).all()


def test_size_not_divisible_by_eight():
    with pytest.raises(ShapeError):
        Backbone(BackboneConfig(channels=16)).encode(_image(0, (90, 96)))


def test_shared_weights_for_both_modalities():
    backbone = Backbone(BackboneConfig(channels=32))
    visible = _image(1)
    thermal = _image(2, modality=Modality.Thermal)
    same = FramePair(visible, ImageTensor(visible.data.clone(), Modality.Thermal))
    f_v, f_t = backbone.encode_pair(same)
    assert torch.equal(f_v, f_t)

    a_v, a_t = backbone.encode_pair(FramePair(visible, thermal))
    b_v, b_t = backbone.encode_pair(FramePair(thermal, visible))
    assert torch.equal(a_v, b_t)
    assert torch.equal(a_t, b_v)


def test_pair_size_mismatch():
    backbone = Backbone(BackboneConfig(channels=16))
    pair = FramePair(_image(0, (64, 64)), _image(1, (32, 64), Modality.Thermal))
    with pytest.raises(ShapeError):
        backbone.encode_pair(pair)


def test_deterministic():
    backbone = Backbone(BackboneConfig(channels=16))
    image = _image(3, (32, 32))
    assert torch.equal(backbone.encode(image), backbone.encode(image))


def test_gradient_of_first_layer_weights():
    torch.manual_seed(0)
    backbone = Backbone(BackboneConfig(channels=8)).double()
    image = torch.rand(1, 3, 16, 16, dtype=torch.double)
    params = dict(backbone.named_parameters())

    def total(weight):
        return functional_call(backbone, {**params, "layers.0.weight": weight}, (image,)).sum()

    weight = params["layers.0.weight"].detach().clone().requires_grad_(True)
    assert torch.autograd.gradcheck(total, (weight,), eps=1e-5, atol=1e-6, rtol=1e-4)
