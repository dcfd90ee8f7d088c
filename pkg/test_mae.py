#!/usr/bin/env python3
"""
Tests for patch masking, the masked autoencoder and full-patch encoding.
"""

import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.frontend import FrontendConfig, PatchSequence, Spectrogram, patchify
from modules.mae import (
    MaeConfig,
    MaskError,
    MaskedAutoencoder,
    encode_full,
    mae_forward,
    mae_loss,
    pretrain_mae,
    random_mask,
    sincos_1d,
    sincos_2d,
)
from modules.optim import OptimizerConfig
from modules.seeding import make_rng
from modules.synth import gen_corpus
from modules.tensor import LossError, Tensor, finite_diff_check
from modules.trainer import clip_spectrogram

SLOW = pytest.mark.skipif(not os.getenv("JMLA_SLOW_TESTS"), reason="JMLA_SLOW_TESTS не задан")


def toy_config(**kwargs) -> MaeConfig:
    values = dict(encoder_layers=1, width=8, heads=2, decoder_layers=1, decoder_width=8, decoder_heads=2, mlp_ratio=2.0)
    values.update(kwargs)
    return MaeConfig(**values)


def random_patches(frames: int, bins: int, seed: int) -> PatchSequence:
    return patchify(Spectrogram(np.random.default_rng(seed).normal(size=(frames, bins))))


def test_random_mask_examples():
    kept, masked = random_mask(4, 0.75, np.random.default_rng(0))
    assert len(kept) == 1 and len(masked) == 3
    kept, masked = random_mask(8, 0.5, np.random.default_rng(1))
    assert len(kept) == 4 and len(masked) == 4
    assert_array_equal(np.sort(np.concatenate([kept, masked])), np.arange(8))


def test_random_mask_rejects_degenerate_splits():
    with pytest.raises(MaskError):
        random_mask(1, 0.5, np.random.default_rng(0))
    with pytest.raises(MaskError):
        random_mask(4, 0.1, np.random.default_rng(0))
    with pytest.raises(MaskError):
        random_mask(4, 1.0, np.random.default_rng(0))


def test_random_mask_is_seed_deterministic():
    a = random_mask(16, 0.75, make_rng(3, "mask"))
    b = random_mask(16, 0.75, make_rng(3, "mask"))
    assert_array_equal(a[0], b[0])
    assert_array_equal(a[1], b[1])


def test_random_mask_frequency_is_uniform():
    rng = np.random.default_rng(4)
    counts = np.zeros(100)
    draws = 10_000
    for _ in range(draws):
        counts[random_mask(100, 0.75, rng)[1]] += 1
    frequency = counts / draws
    assert np.all(np.abs(frequency - 0.75) <= 0.02)


def test_mae_forward_reconstructs_every_patch():
    patches = random_patches(32, 32, 0)
    model = MaskedAutoencoder(toy_config(), np.random.default_rng(0))
    assert mae_forward(patches, None, model).shape == (4, 256)
    mask = random_mask(4, 0.75, np.random.default_rng(1))
    assert mae_forward(patches, mask, model).shape == (4, 256)


def test_mae_forward_ignores_kept_order():
    patches = random_patches(32, 48, 1)
    model = MaskedAutoencoder(toy_config(), np.random.default_rng(1))
    kept = np.array([0, 2, 3, 5])
    out = model(patches, kept).data
    shuffled = model(patches, kept[::-1].copy()).data
    assert_allclose(shuffled, out, atol=1e-9)


def test_mae_loss_hand_cases():
    target = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 2.0, 2.0]])
    assert mae_loss(Tensor(target), target, [0, 1], normalize=False).item() == 0.0
    assert_allclose(mae_loss(Tensor(target + 1.0), target, [0, 1], normalize=False).item(), 1.0)

    # Normalised targets: row 0 -> (x - 2.5) / sqrt(1.25 + 1e-6), row 1 -> (x - 1) / sqrt(1 + 1e-6).
    goal0 = (target[0] - 2.5) / np.sqrt(1.25 + 1e-6)
    goal1 = (target[1] - 1.0) / np.sqrt(1.0 + 1e-6)
    expected = (np.abs(target[0] + 1.0 - goal0).sum() + np.abs(target[1] + 1.0 - goal1).sum()) / 8
    assert_allclose(mae_loss(Tensor(target + 1.0), target, [0, 1]).item(), expected, atol=1e-12)


def test_mae_loss_ignores_kept_patches():
    target = np.random.default_rng(2).normal(size=(3, 256))
    predicted = target.copy()
    predicted[0] += 50.0
    assert mae_loss(Tensor(predicted), target, [1, 2], normalize=False).item() == 0.0
    with pytest.raises(LossError):
        mae_loss(Tensor(predicted), target, [])


def test_mae_gradients_match_finite_differences():
    patches = random_patches(32, 32, 3)
    model = MaskedAutoencoder(toy_config(mask_ratio=0.5), np.random.default_rng(3))
    mask = random_mask(4, 0.5, np.random.default_rng(4))
    params = model.parameters()

    def loss(_):
        return mae_loss(mae_forward(patches, mask, model), patches, mask[1])

    assert finite_diff_check(loss, params, max_entries=3) < 1e-4


def test_zero_steps_returns_initial_encoder():
    cfg = toy_config(steps=0)
    result = pretrain_mae([random_patches(32, 32, 5)], cfg, OptimizerConfig(), seed=7, log_every=0)
    init = MaskedAutoencoder(cfg, make_rng(7, "mae", "init")).encoder.state_dict()
    for name, value in result.encoder.state_dict().items():
        assert_array_equal(value, init[name])
    assert result.losses == []


def test_pretraining_is_deterministic():
    cfg = toy_config(steps=3, batch_size=2)
    data = [random_patches(32, 32, s) for s in range(3)]
    a = pretrain_mae(data, cfg, OptimizerConfig(lr=1e-2), seed=11, log_every=0)
    b = pretrain_mae(data, cfg, OptimizerConfig(lr=1e-2), seed=11, log_every=0)
    assert a.losses == b.losses
    for name, value in a.encoder.state_dict().items():
        assert_array_equal(value, b.encoder.state_dict()[name])


def test_pretrain_rejects_empty_dataset():
    with pytest.raises(ValueError):
        pretrain_mae([], toy_config(), OptimizerConfig(), seed=0)


@pytest.mark.parametrize("width", [4, 6, 8, 10])
def test_position_table_matches_any_width(width):
    coords = np.stack([np.arange(12) // 4, np.arange(12) % 4], axis=1)
    table = sincos_2d(coords, width)
    quarter = width // 4
    assert table.shape == (12, width)
    assert_allclose(table[:, : 2 * quarter], sincos_1d(coords[:, 0], 2 * quarter), atol=0)
    assert_allclose(table[:, 2 * quarter : 4 * quarter], sincos_1d(coords[:, 1], 2 * quarter), atol=0)
    assert np.all(table[:, 4 * quarter :] == 0.0)


def test_autoencoder_accepts_widths_not_divisible_by_four():
    cfg = toy_config(width=6, decoder_width=6)
    cfg.validate()
    model = MaskedAutoencoder(cfg, np.random.default_rng(0))
    out = mae_forward(random_patches(32, 32, 0), random_mask(4, 0.5, np.random.default_rng(1)), model)
    assert out.shape == (4, 256)


def test_encode_full_keeps_every_layer():
    cfg = toy_config(encoder_layers=3)
    encoder = MaskedAutoencoder(cfg, np.random.default_rng(6)).encoder
    short = encode_full(Spectrogram(np.random.default_rng(7).normal(size=(32, 64))), encoder)
    assert short.depth == 3
    assert [layer.shape for layer in short.layers] == [(8, 8)] * 4
    long = encode_full(Spectrogram(np.random.default_rng(8).normal(size=(64, 64))), encoder)
    assert long.patches == 2 * short.patches
    assert all(layer.shape == (16, 8) for layer in long.layers)


@SLOW
def test_two_hundred_steps_halve_the_masked_loss():
    frontend = FrontendConfig()
    clips = gen_corpus(0, 64, split="train")
    data = [patchify(clip_spectrogram(clip, frontend, 128)) for clip in clips]
    cfg = MaeConfig(steps=200)
    result = pretrain_mae(data, cfg, OptimizerConfig(lr=cfg.lr), seed=0, log_every=0)
    first = np.mean(result.losses[:5])
    last = np.mean(result.losses[-5:])
    assert last <= 0.5 * first


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
