import numpy as np
import pytest

from gfm.errors import ConfigError, ShapeError
from gfm.mae import (EmptyMaskError, MaeConfig, MaskedAutoencoder, MaskPlan, make_mask_plan,
                     make_mask_plan_from_quality, masked_mse_eval, n_masked, patchify, posenc_3d, posenc_split,
                     pretrain, random_plans, reconstruct_image, sincos_1d, token_pixel_mask, unpatchify)
from gfm.nn import LrSchedule, masked_mse
from gfm.raster import CLEAR, CLOUD, RasterChip, compute_band_stats, standardize_array
from gfm.synthetic import chip_batch

from gradcheck import check, randomize

TINY = MaeConfig((2, 3, 8, 8), (1, 4, 4), embed_dim=16, depth=1, num_heads=2, decoder_dim=16,
                 decoder_depth=1, decoder_heads=2, mlp_ratio=2.0)


def _chip(raw):
    T, C = raw.shape[:2]
    return RasterChip(raw, tuple(f"B{i:02d}" for i in range(C)), tuple(f"2022-01-{d:02d}" for d in range(1, T + 1)))


# -- masking

def test_masked_counts_full_size_setting():
    cfg = MaeConfig(depth=1, embed_dim=64, num_heads=4)
    assert cfg.n_tokens == 588
    plan = make_mask_plan(cfg.n_tokens, 0.75, 0)
    assert plan.masked.size == 441 and plan.visible.size == 147
    assert n_masked(10, 0.25) == 3  # 2.5 rounds up
    assert n_masked(196, 0.75) == 147


def test_mask_plan_seeded_and_partition():
    a, b = make_mask_plan(100, 0.6, 4), make_mask_plan(100, 0.6, 4)
    assert np.array_equal(a.masked, b.masked)
    assert not np.array_equal(a.masked, make_mask_plan(100, 0.6, 5).masked)
    with pytest.raises(ShapeError):
        MaskPlan(4, [0, 1], [1, 2])


def test_quality_plan_single_pixel():
    cfg = MaeConfig((3, 6, 64, 64), embed_dim=16, depth=1, num_heads=2, decoder_dim=16)
    codes = np.full((3, 64, 64), CLEAR, np.uint8)
    codes[1, 3, 5] = CLOUD
    plan = make_mask_plan_from_quality(cfg.grid, cfg.patch, codes, target_t=1)
    # token (t=1, row 0, col 0) in (t, h, w) row-major order
    assert plan.masked.tolist() == [1 * 16 + 0]
    assert plan.origin == "quality-mask"
    codes[1, 3, 5] = CLEAR
    with pytest.raises(EmptyMaskError):
        make_mask_plan_from_quality(cfg.grid, cfg.patch, codes, target_t=1)
    with pytest.raises(ShapeError):
        make_mask_plan_from_quality(cfg.grid, cfg.patch, codes[:, :60], target_t=1)


# -- positional encoding

def test_sincos_alternates():
    e = sincos_1d([0.0, 1.0], 8)
    assert np.array_equal(e[0], np.tile([0.0, 1.0], 4))
    assert e[1, 0] == np.sin(1.0) and e[1, 1] == np.cos(1.0)


def test_posenc_split_and_distinct():
    assert posenc_split(768) == (192, 288, 288)
    pe = posenc_3d(3, 14, 14, 64)
    assert pe.shape == (588, 64)
    rounded = {tuple(np.round(r, 9)) for r in pe}
    assert len(rounded) == 588
    with pytest.raises(ConfigError):
        posenc_split(40)


def test_posenc_single_timestep_constant_time_part():
    pe = posenc_3d(1, 4, 4, 32)
    d_t = posenc_split(32)[0]
    assert np.all(pe[:, :d_t] == pe[0, :d_t])


# -- patchify

def test_patchify_round_trip_and_order():
    x = np.random.default_rng(0).normal(size=(2, 3, 6, 32, 48))
    p = patchify(x, (1, 16, 16))
    assert p.shape == (2, 3 * 2 * 3, 16 * 16 * 6)
    assert np.array_equal(unpatchify(p, (1, 16, 16), x.shape[1:]), x)
    # token 1 is (t=0, h=0, w=1); its first 6 values are the channels of pixel (0, 16)
    assert np.array_equal(p[0, 1, :6], x[0, 0, :, 0, 16])
    m = token_pixel_mask(np.eye(18, dtype=bool)[None, 1], (1, 16, 16), x.shape[1:])
    assert m[0, 0, :, :16, 16:32].all() and m.sum() == 16 * 16 * 6


# -- model

def test_model_gradients_float64():
    rng = np.random.default_rng(0)
    for trial in range(3):
        model = MaskedAutoencoder(TINY, seed=trial, dtype=np.float64)
        randomize(model.params, rng, scale=0.3)
        x = rng.normal(size=(2, *TINY.input_size))
        visible, mask = random_plans(2, TINY.n_tokens, 0.5, rng)

        def f():
            pred, _ = model.forward(x, visible)
            return masked_mse(pred, model.targets(x), mask)[0]

        pred, cache = model.forward(x, visible)
        _, dpred = masked_mse(pred, model.targets(x), mask)
        model.params.zero_grad()
        model.backward(dpred, cache)
        for name, p in model.params.items():
            assert check(f, p.grad, p.value, max_entries=8, rng=rng) < 1e-4, name


def test_visible_order_does_not_matter():
    model = MaskedAutoencoder(TINY, seed=1)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, *TINY.input_size)).astype(np.float32)
    plan = make_mask_plan(TINY.n_tokens, 0.75, 2)
    a, _ = model.forward(x, plan.visible[None])
    b, _ = model.forward(x, rng.permutation(plan.visible)[None])
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_masked_loss_ignores_visible_predictions():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(1, 8, 5))
    mask = np.zeros((1, 8), bool)
    mask[0, ::2] = True
    p = rng.normal(size=t.shape)
    q = p.copy()
    q[~mask] += 100.0
    assert masked_mse(p, t, mask)[0] == masked_mse(q, t, mask)[0]


def test_input_shape_checked():
    model = MaskedAutoencoder(TINY)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 3, 8, 12), np.float32), np.arange(2)[None])


def test_reconstruct_keeps_visible_pixels():
    raw = chip_batch(2, size=16, t=2, seed=0)[:, :, :3]
    stats = compute_band_stats([_chip(r) for r in raw])
    cfg = MaeConfig((2, 3, 16, 16), (1, 8, 8), embed_dim=16, depth=1, num_heads=2, decoder_dim=16,
                    decoder_depth=1, decoder_heads=2)
    model = MaskedAutoencoder(cfg, seed=0)
    chip = _chip(raw[0])
    plan = make_mask_plan(cfg.n_tokens, 0.5, 0)
    out = reconstruct_image(chip, plan, model, stats)
    pix = token_pixel_mask(plan.mask[None], cfg.patch, cfg.input_size)[0]
    assert np.array_equal(out.data[~pix], raw[0][~pix].astype(np.float32))
    assert not np.array_equal(out.data[pix], raw[0][pix].astype(np.float32))
    none = MaskPlan(cfg.n_tokens, [], np.arange(cfg.n_tokens))
    assert np.array_equal(reconstruct_image(chip, none, model, stats).data, raw[0].astype(np.float32))


def _pretrain_run(steps=6):
    raw = chip_batch(8, size=16, t=2, seed=0)[:, :, :3]
    stats = compute_band_stats([_chip(r) for r in raw])
    x = standardize_array(raw, stats)
    model = MaskedAutoencoder(MaeConfig((2, 3, 16, 16), (1, 8, 8), embed_dim=16, depth=1, num_heads=2,
                                        decoder_dim=16, decoder_depth=1, decoder_heads=2), seed=0)
    losses = pretrain(model, lambda epoch: [x[:4], x[4:]], LrSchedule(1e-3, steps), seed=0)
    return model, x, losses


def test_pretrain_deterministic():
    m1, x, l1 = _pretrain_run()
    m2, _, l2 = _pretrain_run()
    assert l1 == l2 and len(l1) == 6
    assert m1.params.state_bytes() == m2.params.state_bytes()
    assert masked_mse_eval(m1, x) == masked_mse_eval(m2, x)


def test_first_loss_near_target_variance():
    raw = chip_batch(8, size=16, t=2, seed=0)[:, :, :3]
    stats = compute_band_stats([_chip(r) for r in raw])
    x = standardize_array(raw, stats)
    model = MaskedAutoencoder(MaeConfig((2, 3, 16, 16), (1, 8, 8), embed_dim=16, depth=1, num_heads=2,
                                        decoder_dim=16, decoder_depth=1, decoder_heads=2), seed=0)
    first = pretrain(model, lambda epoch: [x], LrSchedule(1e-3, 1), seed=0)[0]
    # an untrained decoder predicts near zero, so the loss is about E[t^2] of standardized pixels
    assert abs(first - float(np.mean(x.astype(np.float64) ** 2))) < 0.15
