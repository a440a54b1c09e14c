import numpy as np
import pytest

from gfm.errors import ConfigError
from gfm.finetune import (REGIMES, FinetuneRegime, SegHeadConfig, SegmentationModel, SegTrainConfig, SkipCounter,
                          cloudgap_finetune_step, infer_gapfill, infer_seg, inverse_frequency_weights,
                          read_sweep_csv, run_data_efficiency_sweep, seg_loss, subsample_indices,
                          train_segmentation, write_sweep_csv)
from gfm.mae import MaeConfig, MaskedAutoencoder
from gfm.raster import CLEAR, CLOUD, BandStats

from gradcheck import check, randomize

CFG = MaeConfig((2, 3, 32, 32), (1, 16, 16), embed_dim=16, depth=1, num_heads=2, decoder_dim=16,
                decoder_depth=1, decoder_heads=2, mlp_ratio=2.0)
HEAD = SegHeadConfig(2, (8, 8, 4, 4))


def _model(seed=0, dtype=np.float32):
    return SegmentationModel(MaskedAutoencoder(CFG, seed=seed, dtype=dtype), HEAD, seed=seed)


def test_logit_shape_and_patch_check():
    m = _model()
    logits, _ = m.forward(np.zeros((2, *CFG.input_size), np.float32))
    assert logits.shape == (2, 32, 32, 2)
    bad = MaskedAutoencoder(MaeConfig((2, 3, 32, 32), (1, 8, 8), embed_dim=16, depth=1, num_heads=2,
                                      decoder_dim=16, decoder_heads=2))
    with pytest.raises(ConfigError):
        SegmentationModel(bad, HEAD)
    with pytest.raises(ConfigError):
        FinetuneRegime("random", False)


def test_segmentation_gradients_float64():
    rng = np.random.default_rng(0)
    m = _model(dtype=np.float64)
    randomize(m.params, rng, scale=0.3)
    x = rng.normal(size=(1, *CFG.input_size))
    labels = rng.integers(0, 2, size=(1, 32, 32))

    def f():
        return seg_loss(m.forward(x)[0], labels, HEAD)[0]

    logits, cache = m.forward(x)
    _, d = seg_loss(logits, labels, HEAD)
    m.params.zero_grad()
    m.backward(d, cache)
    for name, p in m.params.items():
        assert check(f, p.grad, p.value, max_entries=6, rng=rng) < 1e-4, name


def test_frozen_encoder_unchanged_and_trainable_moves():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, *CFG.input_size)).astype(np.float32)
    y = rng.integers(0, 2, size=(4, 32, 32))
    cfg = SegTrainConfig(epochs=2, batch_size=2, lr=1e-3)
    frozen = _model()
    before = frozen.params.state_bytes("encoder.")
    head_before = frozen.params.state_bytes("head.")
    train_segmentation(frozen, REGIMES["frozen"], x, y, cfg)
    assert frozen.params.state_bytes("encoder.") == before
    assert frozen.params.state_bytes("head.") != head_before
    live = _model()
    train_segmentation(live, REGIMES["pretrained"], x, y, cfg)
    assert live.params.state_bytes("encoder.") != before


def test_training_deterministic_with_history():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, *CFG.input_size)).astype(np.float32)
    y = rng.integers(0, 2, size=(4, 32, 32))
    runs = []
    for _ in range(2):
        m = _model()
        h = train_segmentation(m, REGIMES["random"], x, y, SegTrainConfig(epochs=2, batch_size=2, lr=1e-3),
                               val=(x, y))
        runs.append((h, m.params.state_bytes()))
    assert runs[0] == runs[1]
    assert [r["epoch"] for r in runs[0][0]] == [1, 2] and "miou" in runs[0][0][0]


def test_infer_seg_ties_to_lowest_class():
    m = _model()
    m.cls.w.value[:] = 0.0
    m.cls.b.value[:] = 0.0
    pred = infer_seg(np.zeros((2, *CFG.input_size), np.float32), m)
    assert pred.shape == (2, 32, 32) and not pred.any()


def test_inverse_frequency_weights():
    w = inverse_frequency_weights(np.array([0, 0, 0, 1, 255]), 2)
    np.testing.assert_allclose(w, [0.5, 1.5])
    assert inverse_frequency_weights(np.array([0, 0]), 2).tolist() == [2.0, 0.0]


def test_subsample_indices():
    a = subsample_indices(100, 0.25, 3)
    assert len(a) == 25 and np.array_equal(a, np.unique(a))
    assert np.array_equal(a, subsample_indices(100, 0.25, 3))
    assert not np.array_equal(a, subsample_indices(100, 0.25, 4))
    assert np.array_equal(subsample_indices(7, 1.0, 0), np.arange(7))
    with pytest.raises(ValueError):
        subsample_indices(5, 0.1, 0)
    with pytest.raises(ValueError):
        subsample_indices(5, 0.0, 0)


def test_sweep_rows_and_csv(tmp_path):
    rows, summary = run_data_efficiency_sweep(
        20, [1.0, 0.5], [0, 1], lambda idx, seed: {"miou": len(idx) / 20 + seed * 0.01, "n": len(idx)}, workers=2)
    assert len(rows) == 8
    mean, std = summary[(0.5, "miou")]
    assert abs(mean - 0.505) < 1e-12 and abs(std - 0.005) < 1e-12
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert read_sweep_csv(tmp_path / "s.csv") == rows


def _gap_data(rng, n=3):
    x = rng.normal(size=(n, *CFG.input_size)).astype(np.float32)
    codes = np.full((n, 32, 32), CLEAR, np.uint8)
    codes[0, 2:6, 3:9] = CLOUD
    codes[1, 20:30, 20:24] = CLOUD
    return x, codes


def test_cloudgap_step_skips_clear_samples():
    rng = np.random.default_rng(3)
    mae = MaskedAutoencoder(CFG, seed=0)
    x, codes = _gap_data(rng)
    counter = SkipCounter()
    before = mae.params.state_bytes()
    loss = cloudgap_finetune_step(x, codes, mae, 1e-3, counter=counter)
    assert counter.skipped == 1 and loss > 0
    assert mae.params.state_bytes() != before
    assert cloudgap_finetune_step(x[2:], codes[2:], mae, 1e-3, counter=counter) is None
    assert counter.skipped == 2


def test_gapfill_changes_only_bad_pixels():
    rng = np.random.default_rng(4)
    mae = MaskedAutoencoder(CFG, seed=0)
    raw = rng.integers(100, 3000, size=CFG.input_size).astype(np.uint16)
    stats = BandStats([1500.0] * 3, [800.0] * 3, 1)
    codes = np.full((32, 32), CLEAR, np.uint8)
    codes[5:8, 5:8] = CLOUD
    out = infer_gapfill(raw, codes, mae, stats)
    bad = np.zeros(out.shape, bool)
    bad[1][:, codes == CLOUD] = True
    assert np.array_equal(out[~bad], raw[~bad].astype(np.float32))
    assert not np.array_equal(out[bad], raw[bad].astype(np.float32))
    clear = np.full((32, 32), CLEAR, np.uint8)
    assert np.array_equal(infer_gapfill(raw, clear, mae, stats), raw.astype(np.float32))
