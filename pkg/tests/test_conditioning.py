import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from genpano.conditioning import (ContextEncoder, ContextEncoderConfig, encode_context, null_context,
                                  token_positional_encoding)
from genpano.errors import ShapeMismatch
from genpano.posenc import TileBox, build_posenc, crop_posenc

from helpers import central_difference_check


def test_token_pe_spot_values():
    pe = token_positional_encoding(77, 64)
    assert pe[0, 0] == 0.0 and pe[0, 1] == 1.0
    assert pe[1, 0] == pytest.approx(np.sin(1.0), abs=1e-15)
    assert pe[3, 5] == pytest.approx(np.cos(3 / 10000 ** (4 / 64)), abs=1e-15)
    assert np.abs(pe).max() <= 1.0
    with pytest.raises(ValueError):
        token_positional_encoding(4, 7)


@pytest.mark.parametrize("size", [512, 256, 128, 16])
def test_shape_for_any_input(size):
    enc = ContextEncoder(ContextEncoderConfig(12, 16, (7, 11), 32))
    out = enc(torch.randn(1, 12, size, size))
    assert out.shape == (1, 77, 32)


def test_default_width():
    enc = ContextEncoder()
    assert enc.conv1.out_channels == 128 and enc.proj.out_features == 1024
    out = encode_context(build_posenc(512, 512).values, enc)
    assert out.shape == (77, 1024)


def test_zero_input_gives_token_pe():
    enc = ContextEncoder(ContextEncoderConfig(12, 8, (7, 11), 16))
    with torch.no_grad():
        for mod in (enc.conv1, enc.conv2, enc.proj):
            mod.bias.zero_()
        feats = enc.features(torch.zeros(1, 12, 32, 32))
    assert torch.equal(feats[0], enc.token_pe)


def test_layer_norm_statistics():
    enc = ContextEncoder(ContextEncoderConfig(12, 8, (7, 11), 32))
    out = enc(torch.randn(2, 12, 64, 64)).detach()
    assert out.mean(-1).abs().max() < 1e-5
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-3


def test_translation_sensitivity():
    torch.manual_seed(0)
    enc = ContextEncoder(ContextEncoderConfig(12, 8, (7, 11), 32))
    pm = build_posenc(256, 768)
    a = encode_context(crop_posenc(pm, TileBox(0, 0, 128, 128)), enc)
    b = encode_context(crop_posenc(pm, TileBox(300, 64, 128, 128)), enc)
    assert float((a - b).norm()) > 0


def test_null_context():
    cfg = ContextEncoderConfig(12, 8, (7, 11), 32)
    z = null_context(cfg)
    assert z.shape == (77, 32) and float(z.norm()) == 0.0
    assert null_context(cfg, batch=3).shape == (3, 77, 32)


def test_gradient_check():
    torch.manual_seed(1)
    enc = ContextEncoder(ContextEncoderConfig(12, 6, (7, 11), 32)).double()
    x = torch.randn(1, 12, 16, 16, dtype=torch.float64)
    w = torch.randn(1, 77, 32, dtype=torch.float64)
    params = list(enc.parameters())
    assert central_difference_check(lambda: (enc(x) * w).sum(), params) <= 1e-4


def test_bad_input():
    enc = ContextEncoder(ContextEncoderConfig(12, 8, (7, 11), 16))
    with pytest.raises(ShapeMismatch):
        enc(torch.randn(1, 8, 32, 32))
    with pytest.raises(ShapeMismatch):
        enc(torch.randn(1, 12, 3, 3))


@settings(max_examples=10, deadline=None)
@given(h=st.integers(4, 70), w=st.integers(4, 70))
def test_shape_invariance(h, w):
    enc = ContextEncoder(ContextEncoderConfig(12, 4, (7, 11), 8))
    assert enc(torch.randn(1, 12, h, w)).shape == (1, 77, 8)
