#!/usr/bin/env python3
"""
Tests for injection topologies, the gated fusion decoder and the parameter partition.
"""

import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.decoder import (
    DecoderConfig,
    InjectionSite,
    InjectionTopology,
    JmlaModel,
    TextDecoder,
    TopologyError,
    Variant,
    build_topology,
    decoder_forward,
    partition_params,
)
from modules.frontend import Spectrogram
from modules.mae import AudioEncoder, MaeConfig, encode_full
from modules.optim import AdamW, OptimizerConfig
from modules.pipeline import GradcheckConfig, gradcheck_model, run_gradcheck
from modules.resampler import ResamplerConfig
from modules.synth import VOCAB_SIZE, Example, encode_example
from modules.tensor import ShapeError, no_grad
from modules.trainer import TrainItem, train_step

SLOW = pytest.mark.skipif(not os.getenv("JMLA_SLOW_TESTS"), reason="JMLA_SLOW_TESTS не задан")


def toy_model(variant="DenseDec", seed=0, layers=2) -> JmlaModel:
    rng = np.random.default_rng(seed)
    encoder = AudioEncoder(MaeConfig(encoder_layers=layers, width=8, heads=2, mlp_ratio=2.0), rng)
    decoder = TextDecoder(DecoderConfig(layers=layers, width=8, heads=2, mlp_ratio=2.0, max_len=64), rng)
    topology = build_topology(variant, layers, layers)
    return JmlaModel(encoder, decoder, topology, ResamplerConfig(latents=2, depth=1, heads=2), rng)


def toy_stack(model: JmlaModel, seed: int):
    with no_grad():
        return encode_full(Spectrogram(np.random.default_rng(seed).normal(size=(32, 32))), model.encoder)


def set_gates(model: JmlaModel, value: float):
    for block in model.cross_blocks.values():
        block.gate.data[...] = value


def sites(topology):
    return [(s.encoder_layer, s.resampler_id, s.decoder_layer) for s in topology.sites]


def test_topology_examples():
    assert sites(build_topology("Baseline", 4, 4)) == [(4, "r0", 1)]
    assert sites(build_topology("DenseDec", 4, 4)) == [(4, "r0", 1), (4, "r1", 2), (4, "r2", 3), (4, "r3", 4)]
    assert sites(build_topology("DenseEncDec", 4, 4)) == [(1, "r0", 1), (2, "r1", 2), (3, "r2", 3), (4, "r3", 4)]


def test_dense_enc_dec_spreads_taps_in_order():
    assert [s.encoder_layer for s in build_topology(Variant.DENSE_ENC_DEC, 8, 4).sites] == [2, 4, 6, 8]
    assert [s.encoder_layer for s in build_topology(Variant.DENSE_ENC_DEC, 6, 4).sites] == [2, 3, 5, 6]
    with pytest.raises(TopologyError):
        build_topology("DenseEncDec", 2, 4)


def test_topology_rejects_bad_input():
    with pytest.raises(TopologyError):
        build_topology("Sparse", 4, 4)
    with pytest.raises(TopologyError):
        InjectionTopology(Variant.BASELINE, [InjectionSite(4, "r0", 1), InjectionSite(4, "r1", 2)]).validate(4, 4)
    with pytest.raises(TopologyError):
        InjectionTopology(Variant.DENSE_DEC, [InjectionSite(2, "r0", 1)]).validate(4, 4)
    with pytest.raises(TopologyError):
        InjectionTopology(Variant.DENSE_DEC, [InjectionSite(4, "r0", 5)]).validate(4, 4)


def test_topology_description_round_trips():
    topology = build_topology("DenseEncDec", 4, 4)
    text = topology.describe()
    assert text == "DenseEncDec:1/r0/1,2/r1/2,3/r2/3,4/r3/4"
    assert InjectionTopology.parse(text) == topology
    with pytest.raises(TopologyError):
        InjectionTopology.parse("DenseDec:4/r0")


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_zero_gates_reproduce_the_text_decoder(variant):
    model = toy_model(variant)
    rng = np.random.default_rng(1)
    for n in range(100):
        ids = rng.integers(0, VOCAB_SIZE, size=int(rng.integers(1, 40)))
        summaries = model.summarize(toy_stack(model, n))
        assert_array_equal(model.decoder_forward(ids, summaries).data, model.decoder(ids).data)


def test_logits_are_causal():
    model = toy_model()
    set_gates(model, 0.7)
    summaries = model.summarize(toy_stack(model, 0))
    rng = np.random.default_rng(2)
    for _ in range(100):
        ids = rng.integers(0, VOCAB_SIZE, size=24)
        t = int(rng.integers(0, 23))
        changed = ids.copy()
        changed[t + 1 :] = rng.integers(0, VOCAB_SIZE, size=23 - t)
        a = model.decoder_forward(ids, summaries).data
        b = model.decoder_forward(changed, summaries).data
        assert_allclose(b[: t + 1], a[: t + 1], atol=1e-12, rtol=0)


def test_audio_reaches_every_position():
    model = toy_model()
    set_gates(model, 0.7)
    ids = encode_example("What is the genre of the music?", "rock").ids
    a = model.decoder_forward(ids, model.summarize(toy_stack(model, 0))).data
    b = model.decoder_forward(ids, model.summarize(toy_stack(model, 1))).data
    assert np.all(np.abs(a - b).max(axis=1) > 0)


def test_missing_summary_is_a_topology_error():
    model = toy_model()
    summaries = model.summarize(toy_stack(model, 0))
    del summaries["r1"]
    with pytest.raises(TopologyError):
        decoder_forward([1, 2, 3], summaries, model.topology, model)


def test_text_decoder_rejects_bad_tokens():
    model = toy_model()
    with pytest.raises(ShapeError):
        model.decoder([])
    with pytest.raises(ShapeError):
        model.decoder([VOCAB_SIZE])
    with pytest.raises(ShapeError):
        model.decoder(np.zeros(65, dtype=int))


def test_summaries_have_latent_shape():
    model = toy_model("DenseEncDec")
    summaries = model.summarize(toy_stack(model, 3))
    assert sorted(summaries) == ["r0", "r1"]
    assert all(s.shape == (2, 8) for s in summaries.values())


def test_baseline_partition_counts():
    model = toy_model("Baseline")
    partition = partition_params(model)
    assert (partition.resamplers, partition.cross_blocks, partition.gates) == (1, 1, 1)
    expected = model.resamplers["r0"].num_parameters() + model.cross_blocks["r0"].num_parameters()
    assert partition.trainable_count == expected
    assert partition.frozen_count == model.encoder.num_parameters() + model.decoder.num_parameters()
    assert all(p.requires_grad for p in partition.trainable.values())
    assert not any(p.requires_grad for p in partition.frozen.values())


def test_dense_dec_partition_has_one_gate_per_layer():
    partition = partition_params(toy_model("DenseDec", layers=3))
    assert (partition.resamplers, partition.cross_blocks, partition.gates) == (3, 3, 3)


def test_training_leaves_frozen_parameters_untouched():
    model = toy_model()
    partition = partition_params(model)
    before = partition.checksums()
    optimizer = AdamW(partition.trainable, OptimizerConfig(lr=1e-2))
    example = Example("c:qa0", "c", "qa", "What is the genre of the music?", "rock")
    batch = [TrainItem(example, example.tokens(), toy_stack(model, 0))]
    for _ in range(50):
        train_step(batch, model, partition, optimizer, clip_norm=1.0)
    after = partition.checksums()
    assert after["frozen"] == before["frozen"]
    assert after["trainable"] != before["trainable"]
    assert any(abs(g) > 0 for g in model.gates().values())


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_assembled_model_gradients_match_finite_differences(variant):
    assert run_gradcheck(GradcheckConfig(max_entries=3), variant, seed=0) < 1e-4


def test_gradcheck_model_separates_the_topologies():
    cfg = GradcheckConfig()
    layouts = {v.value: sites(gradcheck_model(cfg, v.value, seed=0)[0].topology) for v in Variant}
    assert len(layouts["Baseline"]) == 1
    assert len(layouts["DenseDec"]) == len(layouts["DenseEncDec"]) == cfg.layers
    assert len({tuple(layout) for layout in layouts.values()}) == 3


@SLOW
@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_full_gradient_sweep_over_every_parameter(variant):
    cfg = GradcheckConfig()
    assert cfg.max_entries == 0
    assert run_gradcheck(cfg, variant, seed=0) < cfg.tolerance


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
