import csv

import numpy as np
import pytest
import torch

from genpano.backbone.model import InpaintModel, digest, parameter_groups
from genpano.errors import ShapeMismatch
from genpano.layout import PanoramaFrame, PerturbationBounds, SparsePanorama
from genpano.posenc import build_posenc
from genpano.training import (LossStats, MaskParams, TrainBatch, TrainConfig, build_optimizer, conditioning,
                              masked_loss, masked_loss_from_prediction, sample_crop, smoothed, synthesize_mask,
                              touches_border, train)

from helpers import central_difference_check


def tiny_model(seed=0, codec=None, live_head=False):
    torch.manual_seed(seed)
    model = InpaintModel.toy(channels=(4, 4), d_ctx=4, heads=1, ctx_hidden=4,
                             codec=codec or {"name": "patchify", "patch": 2})
    if live_head:
        # a zero output head would block every gradient
        torch.nn.init.normal_(model.unet.conv_out.weight, std=0.3)
    return model


def coordinate_panorama(H=48, W=96):
    """Canvas whose red/green channels encode x and y, valid on the left two thirds."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float32)
    canvas = np.stack([xs / W, ys / H, np.full_like(xs, 0.5)], -1)
    valid = xs < 2 * W // 3
    canvas[~valid] = 0
    frame = PanoramaFrame((H, W), 100.0, (W / 2, H / 2), (W / 2, H / 2))
    return SparsePanorama(canvas, valid, "img_000", np.eye(3), frame)


def random_batch(model, B=2, hw=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    c = model.codec.latent_channels
    z = torch.randn(B, c, hw, hw, generator=g, dtype=dtype)
    m = (torch.rand(B, 1, hw, hw, generator=g) > 0.5).to(dtype)
    mv = (torch.rand(B, 1, hw, hw, generator=g) > 0.3).to(dtype)
    ctx = torch.randn(B, 77, model.ctx_encoder.config.d_ctx, generator=g, dtype=dtype)
    t = torch.randint(1, 1001, (B,), generator=g)
    eps = torch.randn(z.shape, generator=g, dtype=dtype)
    return TrainBatch(z, m, mv, ctx, t, eps)


# -- masks ---------------------------------------------------------------

def test_mask_fraction_bounds():
    rng = np.random.default_rng(0)
    p = MaskParams(min_fraction=0.2, max_fraction=0.6)
    for _ in range(100):
        frac = synthesize_mask((64, 64), rng, p).mean()
        assert 0.2 <= frac <= 0.6


def test_forced_fraction_when_draws_fail():
    rng = np.random.default_rng(1)
    p = MaskParams(max_shapes=0, boundary_prob=0.0, min_fraction=0.3, max_fraction=0.5, max_tries=3)
    for _ in range(20):
        frac = synthesize_mask((40, 56), rng, p).mean()
        assert 0.3 <= frac <= 1.0


def test_boundary_masks_reach_border():
    rng = np.random.default_rng(2)
    p = MaskParams(max_shapes=0, boundary_prob=1.0, min_fraction=0.0, max_fraction=1.0)
    assert all(touches_border(synthesize_mask((64, 64), rng, p)) for _ in range(20))


def test_mask_determinism():
    a = synthesize_mask((32, 48), np.random.default_rng(5))
    b = synthesize_mask((32, 48), np.random.default_rng(5))
    assert a.dtype == bool and np.array_equal(a, b)


# -- crops ---------------------------------------------------------------

def test_crop_and_encoding_share_box():
    sp = coordinate_panorama()
    pm = build_posenc(48, 96)
    rng = np.random.default_rng(3)
    for _ in range(20):
        crop, pe, valid, idx = sample_crop([sp], pm, rng, 16, bounds=None)
        assert idx == 0 and crop.shape == (16, 16, 3) and pe.shape == (16, 16, 12)
        if valid[0, 0]:
            x0, y0 = int(round(crop[0, 0, 0] * 96)), int(round(crop[0, 0, 1] * 48))
            assert np.array_equal(pe, pm.values[y0:y0 + 16, x0:x0 + 16])
            assert np.array_equal(valid, sp.valid[y0:y0 + 16, x0:x0 + 16])
        assert valid.mean() >= 0.05


def test_crop_too_large():
    with pytest.raises(ShapeMismatch):
        sample_crop([coordinate_panorama()], build_posenc(48, 96), np.random.default_rng(0), 64)


# -- loss ----------------------------------------------------------------

def test_loss_zero_for_exact_prediction():
    eps = torch.randn(2, 3, 4, 4)
    mv = (torch.rand(2, 1, 4, 4) > 0.5).float()
    mv[0, 0, 0, 0] = 1
    assert float(masked_loss_from_prediction(eps.clone(), eps, mv)) == 0.0


def test_loss_is_masked_mean():
    eps_hat, eps = torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2)
    eps_hat[0, :, 0, 0] = 2.0
    eps_hat[0, :, 1, 1] = 100.0
    mv = torch.tensor([[[[1.0, 1.0], [0.0, 0.0]]]])
    # valid entries: 2 cells x 2 channels, errors 4, 4, 0, 0
    assert float(masked_loss_from_prediction(eps_hat, eps, mv)) == pytest.approx(2.0)


def test_empty_validity():
    stats = LossStats()
    x = torch.randn(1, 3, 4, 4, requires_grad=True)
    loss = masked_loss_from_prediction(x, torch.randn(1, 3, 4, 4), torch.zeros(1, 1, 4, 4), stats)
    assert float(loss.detach()) == 0.0 and stats.empty_batches == 1
    loss.backward()
    assert torch.count_nonzero(x.grad) == 0


def test_conditioning_marks_invalid_as_holes():
    z = torch.ones(1, 1, 2, 2)
    m = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
    mv = torch.tensor([[[[1.0, 1.0], [0.0, 1.0]]]])
    m_cond, masked = conditioning(z, m, mv)
    assert m_cond.tolist() == [[[[1, 0], [1, 0]]]]
    assert masked.tolist() == [[[[0, 1], [0, 1]]]]


def test_loss_invariant_to_invalid_entries():
    model = tiny_model(live_head=True)
    batch = random_batch(model)
    with torch.no_grad():
        ref = masked_loss(batch, model)
    for k in range(5):
        noise = 1e3 * torch.randn(batch.z_crop.shape, generator=torch.Generator().manual_seed(k))
        z = torch.where(batch.m_valid.bool().expand_as(noise), batch.z_crop, noise)
        other = TrainBatch(z, batch.m, batch.m_valid, batch.c_ctx, batch.t, batch.eps)
        with torch.no_grad():
            assert abs(float(masked_loss(other, model)) - float(ref)) <= 1e-7


def test_loss_gradient_check():
    model = tiny_model(1, codec={"name": "identity"}, live_head=True).double()
    params = list(model.unet.parameters())
    assert sum(p.numel() for p in params) <= 5000
    batch = random_batch(model, dtype=torch.float64)
    assert central_difference_check(lambda: masked_loss(batch, model), params) <= 1e-4


def test_batch_validation():
    model = tiny_model()
    b = random_batch(model)
    with pytest.raises(ShapeMismatch):
        TrainBatch(b.z_crop, b.m[:, :, :4], b.m_valid, b.c_ctx, b.t, b.eps).validate()
    with pytest.raises(ShapeMismatch):
        masked_loss_from_prediction(b.eps[:1], b.eps, b.m_valid)


# -- optimizer and loop ----------------------------------------------------

def test_config_round_trip():
    cfg = TrainConfig(iterations=7, perturbation=PerturbationBounds(scale_range=(0.9, 1.1)))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(lr_lora=0)


def test_optimizer_groups():
    model = tiny_model()
    model.add_lora()
    opt = build_optimizer(model, TrainConfig())
    by_name = {g["name"]: g for g in opt.param_groups}
    assert by_name["lora"]["lr"] == 1e-4 and by_name["lora"]["weight_decay"] == 0.0
    assert by_name["cross"]["lr"] == 3e-4 and by_name["ctx"]["lr"] == 8e-4
    assert all(not p.requires_grad for _, p in parameter_groups(model)["frozen"])


def short_run(tmp_path, name):
    sp = coordinate_panorama()
    cfg = TrainConfig(iterations=4, batch_size=2, crop_size=16, checkpoint_every=2, seed=9)
    return train([sp], build_posenc(48, 96), cfg, tiny_model(3, live_head=True), tmp_path / name, {"pano_dims": [48, 96]},
                 log_every=0)


def test_train_freezes_base_and_writes_outputs(tmp_path):
    model_before = tiny_model(3, live_head=True)
    res = short_run(tmp_path, "a")
    assert res.frozen_digest_before == res.frozen_digest_after
    assert len(res.losses) == 4 and all(np.isfinite(res.losses))
    assert [p.name for p in res.checkpoints] == ["step_000002.safetensors", "final.safetensors"]
    rows = list(csv.reader(open(tmp_path / "a" / "loss.csv")))
    assert rows[0][:2] == ["step", "loss"] and len(rows) == 5
    # trainable groups moved, frozen weights did not
    groups = parameter_groups(res.model)
    assert digest(groups["frozen"]) == digest(
        [(n, p) for n, p in model_before.add_lora().named_parameters() if n in dict(groups["frozen"])])
    assert any(float(p.detach().abs().sum()) > 0 for n, p in groups["lora"] if "lora_B" in n)


def test_train_is_deterministic(tmp_path):
    a = short_run(tmp_path, "a")
    b = short_run(tmp_path, "b")
    assert a.losses == b.losses
    assert digest(a.model.named_parameters()) == digest(b.model.named_parameters())


def test_train_needs_data():
    with pytest.raises(ValueError):
        train([], build_posenc(48, 96), TrainConfig(iterations=1), tiny_model())


def test_smoothed():
    assert np.allclose(smoothed(np.arange(10.0), window=5), np.arange(2, 8))
    assert np.array_equal(smoothed([1.0, 2.0], window=5), [1.0, 2.0])
