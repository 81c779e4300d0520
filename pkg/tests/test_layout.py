import numpy as np
import pytest

from genpano.errors import DegenerateConfiguration, DisconnectedGraph, TooFewFeatures, TooFewInliers
from genpano.features import ClassicalMatcher, FeatureMatch, detect_and_match
from genpano.homography import RansacConfig, corner_transfer_error, dlt, estimate_homography, transfer
from genpano.layout import (LayoutConfig, PanoramaFrame, PerturbationBounds, SimilarityPerturbation,
                            SparsePanorama, apply_perturbation, build_sparse_panoramas, valid_centroid,
                            warp_to_panorama)
from genpano.scene_io import RefImage, make_synthetic_scene, make_texture


@pytest.fixture(scope="module")
def scene():
    return make_synthetic_scene(0)


@pytest.fixture(scope="module")
def texture():
    return make_texture(np.random.default_rng(11), 256, 384)


def matches_from(src, dst):
    return [FeatureMatch(tuple(a), tuple(b), 1.0) for a, b in zip(src, dst)]


def random_h(rng):
    H = np.eye(3) + np.diag([0.1, 0.1, 0]) * rng.uniform(-1, 1, 3)
    H[0, 1], H[1, 0] = rng.uniform(-0.1, 0.1, 2)
    H[:2, 2] = rng.uniform(-30, 30, 2)
    H[2, :2] = rng.uniform(-3e-4, 3e-4, 2)
    return H


# -- features --------------------------------------------------------------

def test_self_match(texture):
    ms = ClassicalMatcher()(texture, texture)
    assert len(ms) > 50
    same = np.all(ms.pts_a == ms.pts_b, axis=1).mean()
    assert same >= 0.95


def test_shift_offset(texture):
    shifted = np.zeros_like(texture)
    shifted[:, 10:] = texture[:, :-10]
    ms = ClassicalMatcher()(texture, shifted)
    d = np.median(ms.pts_b - ms.pts_a, axis=0)
    assert abs(d[0] - 10) <= 0.5 and abs(d[1]) <= 0.5


def test_matching_is_symmetric(texture, scene):
    a, b = scene.views[0].image, scene.views[1].image
    m = ClassicalMatcher()
    ab, ba = m(a, b), m(b, a)
    fwd = {(tuple(p), tuple(q)) for p, q in zip(ab.pts_a, ab.pts_b)}
    bwd = {(tuple(q), tuple(p)) for p, q in zip(ba.pts_a, ba.pts_b)}
    assert fwd == bwd


def test_unrelated_noise_fails():
    rng = np.random.default_rng(0)
    a, b = rng.random((128, 128, 3)), rng.random((128, 128, 3))
    try:
        ms = detect_and_match(a, b)
        assert len(ms) < 8
    except TooFewFeatures:
        pass


# -- homography ------------------------------------------------------------

def test_identity_homography():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 200, (50, 2))
    H, inl = estimate_homography(matches_from(pts, pts))
    np.testing.assert_allclose(H, np.eye(3), atol=1e-6)
    assert inl.all()


def test_minimal_exact_case():
    rng = np.random.default_rng(2)
    Ht = random_h(rng)
    src = np.array([[0, 0], [100, 5], [90, 120], [-10, 80]], float)
    H, _ = estimate_homography(matches_from(src, transfer(Ht, src)))
    assert np.abs(transfer(H, src) - transfer(Ht, src)).max() <= 1e-8


def test_outliers_and_noise():
    rng = np.random.default_rng(3)
    Ht = random_h(rng)
    src = rng.uniform(0, 300, (200, 2))
    dst = transfer(Ht, src) + rng.normal(0, 0.5, (200, 2))
    out = rng.random(200) < 0.3
    dst[out] = rng.uniform(0, 300, (out.sum(), 2))
    cfg = RansacConfig()
    H, inl = estimate_homography(matches_from(src, dst), cfg)
    assert corner_transfer_error(H, Ht, 300, 300) <= 1.5
    err = np.linalg.norm(transfer(H, src[inl]) - dst[inl], axis=1)
    assert err.max() <= cfg.threshold


def test_scale_equivariance():
    rng = np.random.default_rng(4)
    Ht = random_h(rng)
    src = rng.uniform(0, 300, (60, 2))
    dst = transfer(Ht, src) + rng.normal(0, 0.3, (60, 2))
    s = 2.5
    S = np.diag([s, s, 1.0])
    H1 = dlt(src, dst)
    H2 = dlt(src * s, dst * s)
    conj = S @ H1 @ np.linalg.inv(S)
    np.testing.assert_allclose(H2 / H2[2, 2], conj / conj[2, 2], atol=1e-6)


def test_degenerate_and_too_few():
    line = np.stack([np.arange(6.0), 2 * np.arange(6.0)], 1)
    with pytest.raises(DegenerateConfiguration):
        dlt(line[:4], line[:4] + 1)
    with pytest.raises(TooFewInliers):
        estimate_homography(matches_from(line[:3], line[:3]))


# -- sparse panoramas --------------------------------------------------------

@pytest.fixture(scope="module")
def sparse(scene):
    return build_sparse_panoramas(scene.refs, scene.center_id, (256, 768), LayoutConfig(focal=scene.focal))


def test_layout_cardinality_and_zero_outside(sparse, scene):
    assert len(sparse) == len(scene.views)
    assert {sp.dims for sp in sparse} == {(256, 768)}
    for sp in sparse:
        assert np.all(sp.canvas[~sp.valid] == 0)


def test_layout_matches_ground_truth(sparse, scene):
    h, w = scene.view_dims
    for sp, v in zip(sparse, scene.views):
        assert corner_transfer_error(sp.placement, v.homography, w, h) <= 3.0
        # content lands where the texture has it (center view carries no jitter)
    c = sparse[scene.center_index]
    assert np.abs(c.canvas - scene.texture)[c.valid].mean() < 0.01


def test_center_reference_centered(sparse, scene):
    c = sparse[scene.center_index]
    cx, cy = valid_centroid(c.valid)
    assert abs(cx - 383.5) < 1.0 and abs(cy - 127.5) < 1.0


def test_single_reference_auto_dims(scene):
    ref = scene.refs[1]
    (sp,) = build_sparse_panoramas([ref], ref.id, None, LayoutConfig(focal=scene.focal))
    cx, cy = valid_centroid(sp.valid)
    H, W = sp.dims
    assert abs(cx - (W - 1) / 2) < 1.0 and abs(cy - (H - 1) / 2) < 1.0
    # footprint by inverse-mapping every canvas pixel into the reference
    h, w = ref.shape
    Y, X = np.mgrid[0:H, 0:W].astype(float)
    u, v = sp.frame.pano_to_plane(X, Y)
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    perimeter = 2 * (h + w)
    assert abs(int(sp.valid.sum()) - int(inside.sum())) <= 2 * perimeter
    assert not np.any(sp.valid & ~inside)


def test_large_focal_is_translation():
    rng = np.random.default_rng(5)
    img = rng.random((80, 100, 3)).astype(np.float32)
    f = 1e6 * 100
    frame = PanoramaFrame((120, 160), f, (49.5, 39.5), (79.5, 59.5))
    canvas, valid = warp_to_panorama(img, np.eye(3), frame)
    X, Y = frame.plane_to_pano(np.array([0.0, 99.0]), np.array([0.0, 79.0]))
    np.testing.assert_allclose(X, [30.0, 129.0], atol=0.1)
    np.testing.assert_allclose(Y, [20.0, 99.0], atol=0.1)
    np.testing.assert_allclose(canvas[25:95, 35:125], img[5:75, 5:95], atol=1e-4)


def test_disconnected_graph(scene):
    rng = np.random.default_rng(9)
    noise = RefImage(rng.random((200, 300, 3)).astype(np.float32), "zz_noise.png")
    with pytest.raises(DisconnectedGraph) as e:
        build_sparse_panoramas(scene.refs + [noise], scene.center_id, (256, 768), LayoutConfig(focal=scene.focal))
    assert e.value.ids == ["zz_noise.png"]


# -- perturbation ------------------------------------------------------------

def test_identity_perturbation(sparse):
    out = apply_perturbation(sparse[0], SimilarityPerturbation())
    assert np.array_equal(out.canvas, sparse[0].canvas) and np.array_equal(out.valid, sparse[0].valid)


def test_translation_moves_centroid(sparse):
    sp = sparse[1]
    out = apply_perturbation(sp, SimilarityPerturbation(translation=(5.0, 0.0)))
    a, b = valid_centroid(sp.valid), valid_centroid(out.valid)
    assert abs(b[0] - a[0] - 5) <= 0.5 and abs(b[1] - a[1]) <= 0.5


def test_scale_changes_area():
    valid = np.zeros((256, 768), bool)
    valid[78:178, 300:450] = True
    sp = SparsePanorama(np.where(valid[..., None], 0.5, 0).repeat(3, 2).astype(np.float32), valid, "x", np.eye(3))
    out = apply_perturbation(sp, SimilarityPerturbation(rotation=np.deg2rad(2), scale=1.03))
    assert out.valid.sum() / valid.sum() == pytest.approx(1.03 ** 2, rel=0.05)
    assert np.all(out.canvas[~out.valid] == 0)


def test_bounds_sampling():
    b = PerturbationBounds()
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert b.contains(b.sample(rng, (256, 768)), (256, 768))
    with pytest.raises(ValueError):
        PerturbationBounds(scale_range=(0.0, 1.0))
