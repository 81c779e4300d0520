import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genpano.errors import BadChannelCount, OutOfBounds
from genpano.posenc import TileBox, build_posenc, crop_posenc, frequencies


def direct_value(H, W, f_min, f_max, C, y, x, c):
    # straight transcription of the closed form, one probe at a time
    F = C // 4
    axis, r = divmod(c, 2 * F)
    i, trig = divmod(r, 2)
    f = math.exp(math.log(f_min) + i * (math.log(f_max) - math.log(f_min)) / F)
    p = (2 * (x + 0.5) - W) / W if axis == 0 else (2 * (y + 0.5) - H) / H
    return math.sin(math.pi * p * f) if trig == 0 else math.cos(math.pi * p * f)


def test_default_frequencies():
    f = frequencies(1.0, 50.0, 3)
    assert f[0] == 1.0
    assert f[1] == pytest.approx(50 ** (1 / 3), abs=1e-12)
    assert f[1] == pytest.approx(3.684, abs=5e-4)
    assert f[2] == pytest.approx(13.572, abs=5e-4)


def test_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    H, W = 97, 211
    pm = build_posenc(H, W)
    ys, xs, cs = rng.integers(0, H, 2000), rng.integers(0, W, 2000), rng.integers(0, 12, 2000)
    diff = max(abs(pm.values[y, x, c] - direct_value(H, W, 1.0, 50.0, 12, y, x, c)) for y, x, c in zip(ys, xs, cs))
    assert diff <= 1e-6


def test_center_column_is_zero_phase():
    pm = build_posenc(33, 65)
    col = pm.values[:, 32, :6]
    np.testing.assert_allclose(col[:, 0::2], 0.0, atol=1e-7)
    np.testing.assert_allclose(col[:, 1::2], 1.0, atol=1e-7)


def test_channel_count_and_errors():
    assert build_posenc(8, 8, C=8).channels == 8
    for bad in (0, 6, 10, -4):
        with pytest.raises(BadChannelCount):
            build_posenc(8, 8, C=bad)


@settings(max_examples=25, deadline=None)
@given(H=st.integers(2, 40), W=st.integers(2, 40), F=st.integers(1, 5),
       f_max=st.floats(1.0, 80.0))
def test_range_and_unit_circle(H, W, F, f_max):
    v = build_posenc(H, W, 1.0, f_max, 4 * F).values.astype(np.float64)
    assert v.min() >= -1 and v.max() <= 1
    np.testing.assert_allclose(v[..., 0::2] ** 2 + v[..., 1::2] ** 2, 1.0, atol=1e-6)
    # x channels constant down columns, y channels constant along rows
    assert np.all(v[:, :, : 2 * F] == v[:1, :, : 2 * F])
    assert np.all(v[:, :, 2 * F:] == v[:, :1, 2 * F:])


def test_symmetry_about_center():
    v = build_posenc(16, 50).values
    mirrored = v[:, ::-1, :6]
    np.testing.assert_allclose(v[:, :, 0:6:2], -mirrored[:, :, 0::2], atol=1e-6)
    np.testing.assert_allclose(v[:, :, 1:6:2], mirrored[:, :, 1::2], atol=1e-6)


def test_crop_is_pure_indexing():
    pm = build_posenc(100, 300)
    assert np.array_equal(crop_posenc(pm, TileBox(0, 0, 100, 300)), pm.values)
    a = crop_posenc(pm, TileBox(10, 20, 50, 50))
    b = crop_posenc(pm, TileBox(30, 30, 50, 50))
    assert np.array_equal(a[10:, 20:], b[:40, :30])
    with pytest.raises(OutOfBounds):
        crop_posenc(pm, TileBox(260, 0, 50, 50))


def test_large_map_top_left_slab():
    pm = build_posenc(1000, 3000)
    c = crop_posenc(pm, TileBox(0, 0, 512, 512))
    assert c.shape == (512, 512, 12)
    assert np.array_equal(c, pm.values[:512, :512])
