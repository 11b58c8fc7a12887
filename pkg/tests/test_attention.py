import torch

from mfgtrack.attention import CBAM
from mfgtrack.config import CBAMConfig


def _cbam(channels=16, seed=0):
    torch.manual_seed(seed)
    return CBAM(channels, CBAMConfig(reduction=4)).double()


def test_gates_in_open_unit_interval():
    cbam = _cbam()
    x = torch.randn(2, 16, 7, 9, dtype=torch.double) * 3
    for gate in (cbam.channel_attention(x), cbam.spatial_attention(x)):
        assert (gate > 0).all() and (gate < 1).all()
    assert cbam.channel_attention(x).shape == (2, 16)
    assert cbam.spatial_attention(x).shape == (2, 7, 9)


def test_spatially_constant_input():
    cbam = _cbam()
    v = torch.randn(16, dtype=torch.double)
    x = v[:, None, None].expand(16, 5, 5)
    expected = torch.sigmoid(2 * cbam.mlp(v))
    torch.testing.assert_close(cbam.channel_attention(x)[0], expected)


def test_channel_attention_ignores_spatial_permutation():
    cbam = _cbam()
    x = torch.randn(1, 16, 6, 6, dtype=torch.double)
    perm = torch.randperm(36)
    shuffled = x.flatten(2)[:, :, perm].view_as(x)
    torch.testing.assert_close(
        cbam.channel_attention(shuffled), cbam.channel_attention(x), atol=1e-9, rtol=0
    )


def test_spatial_attention_ignores_channel_permutation():
    cbam = _cbam()
    x = torch.randn(1, 16, 6, 6, dtype=torch.double)
    shuffled = x[:, torch.randperm(16)]
    torch.testing.assert_close(
        cbam.spatial_attention(shuffled), cbam.spatial_attention(x), atol=1e-9, rtol=0
    )


def test_hot_pixel_peaks_nearby():
    cbam = _cbam()
    with torch.no_grad():
        cbam.conv.weight.fill_(0.1)
    x = torch.zeros(1, 16, 15, 15, dtype=torch.double)
    x[:, :, 7, 7] = 5.0
    att = cbam.spatial_attention(x)[0]
    row, col = divmod(int(att.argmax()), 15)
    assert abs(row - 7) <= 3 and abs(col - 7) <= 3
    assert att[7, 7] > att[0, 0]


def test_apply_cbam_shape_and_zero():
    cbam = _cbam()
    x = torch.randn(16, 8, 8, dtype=torch.double)
    assert cbam.apply_cbam(x).shape == x.shape
    zero = torch.zeros(16, 8, 8, dtype=torch.double)
    assert torch.equal(cbam.apply_cbam(zero), zero)


def test_gating_never_amplifies():
    cbam = _cbam()
    x = torch.randn(2, 16, 8, 8, dtype=torch.double)
    refined = x * cbam.channel_attention(x)[:, :, None, None]
    out = cbam(x)
    assert (refined.abs() <= x.abs()).all()
    assert (out.abs() <= refined.abs()).all()
    nonzero = x != 0
    assert (out.abs()[nonzero] < x.abs()[nonzero]).all()


def test_gradient():
    cbam = _cbam(channels=8)
    x = torch.randn(1, 8, 5, 5, dtype=torch.double, requires_grad=True)
    assert torch.autograd.gradcheck(cbam, (x,), eps=1e-5, atol=1e-6, rtol=1e-4)
