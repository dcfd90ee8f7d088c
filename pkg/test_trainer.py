#!/usr/bin/env python3
"""
Tests for the training schedules: answer-only loss, frozen sets, data modes and determinism.
"""

import json
import os
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.decoder import DecoderConfig, TextDecoder, partition_params
from modules.frontend import FrontendConfig
from modules.mae import AudioEncoder, MaeConfig
from modules.optim import AdamW, OptimizerConfig
from modules.resampler import ResamplerConfig
from modules.seeding import make_rng
from modules.synth import QUESTIONS, RAW_QUESTION, Example, Role, TagVocabulary, TokenSequence, encode_example, gen_corpus
from modules.trainer import (
    FeatureCache,
    TextConfig,
    TrainConfig,
    TrainItem,
    build_jmla,
    pretrain_text,
    run_schedule,
    sequence_loss,
    text_corpus,
    train_step,
)

SLOW = pytest.mark.skipif(not os.getenv("JMLA_SLOW_TESTS"), reason="JMLA_SLOW_TESTS не задан")
FRAMES = 16


def toy_parts(seed=0, width=8, layers=2, heads=2, max_len=64):
    rng = make_rng(seed, "toy")
    encoder = AudioEncoder(MaeConfig(encoder_layers=layers, width=width, heads=heads, mlp_ratio=2.0), rng)
    decoder = TextDecoder(DecoderConfig(layers=layers, width=width, heads=heads, mlp_ratio=2.0, max_len=max_len), rng)
    return encoder, decoder


def toy_run(cfg: TrainConfig, seed=0, n_clips=6):
    encoder, decoder = toy_parts(seed)
    model, partition = build_jmla(encoder, decoder, cfg.topology, ResamplerConfig(latents=2, depth=1, heads=2), seed)
    clips = gen_corpus(seed, n_clips, split="train")
    cache = FeatureCache(encoder, FrontendConfig(), FRAMES)
    result = run_schedule(cfg, model, partition, clips, cache, seed, log_every=0)
    return model, partition, result


def test_padding_does_not_change_the_loss():
    _, decoder = toy_parts()
    tokens = encode_example("What is the genre of the music?", "rock")
    padded = tokens.padded(len(tokens) + 9)
    a = sequence_loss(decoder(tokens.ids), tokens).item()
    b = sequence_loss(decoder(padded.ids), padded).item()
    assert_allclose(b, a, atol=1e-12, rtol=0)


def test_question_labels_do_not_enter_the_loss():
    _, decoder = toy_parts()
    tokens = encode_example("What instrument is playing?", "piano")
    logits = decoder(tokens.ids)
    relabelled = tokens.ids.copy()
    question = np.flatnonzero(tokens.roles == Role.QUESTION)[1:-1]
    relabelled[question] = np.random.default_rng(0).integers(0, 256, size=question.size)
    other = TokenSequence(relabelled, tokens.roles)
    assert sequence_loss(logits, other).item() == sequence_loss(logits, tokens).item()


def test_step_at_zero_lr_changes_nothing():
    encoder, decoder = toy_parts()
    model, partition = build_jmla(encoder, decoder, "DenseDec", ResamplerConfig(latents=2, depth=1, heads=2), 0)
    before = model.state_dict()
    cache = FeatureCache(encoder, FrontendConfig(), FRAMES)
    clip = gen_corpus(0, 1, split="train")[0]
    example = Example("x:qa0", clip.clip_id, "qa", *clip.qa_pairs[0])
    optimizer = AdamW(partition.trainable, OptimizerConfig(lr=0.0))
    loss = train_step([TrainItem(example, example.tokens(), cache.get(clip))], model, partition, optimizer, 1.0)
    assert np.isfinite(loss)
    for name, value in model.state_dict().items():
        assert_array_equal(value, before[name])


def test_config_phases_and_validation():
    assert [(m.value, n) for m, n in TrainConfig(steps=5).phases()] == [("GPT-QA", 5)]
    finetune = TrainConfig(steps=5, data_mode="Finetune", finetune_steps=3)
    assert [(m.value, n) for m, n in finetune.phases()] == [("Both", 5), ("GPT-QA", 3)]
    with pytest.raises(ValueError):
        TrainConfig(data_mode="Finetune").validate()
    with pytest.raises(ValueError):
        TrainConfig(topology="Sparse").validate()
    with pytest.raises(ValueError):
        TrainConfig(steps=0).validate()


def test_gpt_qa_mode_never_sees_raw_captions():
    _, _, result = toy_run(TrainConfig(steps=6, batch_size=3, lr=1e-3))
    ids = result.log.example_ids()
    assert len(ids) == 18
    assert all(":qa" in eid for eid in ids)
    assert not any(eid.endswith(":raw") for eid in ids)


def test_raw_caption_mode_sees_only_captions():
    _, _, result = toy_run(TrainConfig(steps=3, batch_size=2, data_mode="RawCaption"))
    assert all(eid.endswith(":raw") for eid in result.log.example_ids())


def test_finetune_marks_the_phase_boundary():
    cfg = TrainConfig(steps=3, batch_size=2, data_mode="Finetune", finetune_steps=2)
    _, _, result = toy_run(cfg)
    assert [r.data_mode for r in result.log.records] == ["Both"] * 3 + ["GPT-QA"] * 2
    assert [r.step for r in result.log.records] == [1, 2, 3, 4, 5]
    assert result.steps == 5


def test_schedule_keeps_frozen_sets_and_is_deterministic(tmp_path):
    cfg = TrainConfig(steps=4, batch_size=2, lr=1e-2)
    model_a, partition_a, a = toy_run(cfg)
    model_b, _, b = toy_run(cfg)
    assert a.log.losses == b.log.losses
    assert a.log.example_ids() == b.log.example_ids()
    for name, value in model_a.state_dict().items():
        assert_array_equal(value, model_b.state_dict()[name])

    encoder, decoder = toy_parts()
    assert partition_a.checksums()["frozen"] == partition_params(
        build_jmla(encoder, decoder, cfg.topology, ResamplerConfig(latents=2, depth=1, heads=2), 0)[0]
    ).checksums()["frozen"]

    path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    a.log.export_jsonl(str(path_a))
    b.log.export_jsonl(str(path_b))
    assert path_a.read_bytes() == path_b.read_bytes()
    record = json.loads(path_a.read_text(encoding="utf-8").splitlines()[0])
    assert set(record) == {"step", "loss", "gates", "param_norm", "data_mode", "example_ids"}


def test_log_records_gates_per_site():
    _, _, result = toy_run(TrainConfig(steps=2, batch_size=2, lr=1e-2))
    for record in result.log.records:
        assert sorted(record.gates) == ["r0", "r1"]
        assert np.isfinite(record.loss) and record.param_norm > 0


def test_threaded_cache_matches_sequential():
    encoder, _ = toy_parts()
    clips = gen_corpus(0, 5, split="train")
    single = FeatureCache(encoder, FrontendConfig(), FRAMES, thread_count=1)
    threaded = FeatureCache(encoder, FrontendConfig(), FRAMES, thread_count=3)
    single.warm(clips)
    threaded.warm(clips)
    assert len(threaded) == 5
    for clip in clips:
        for x, y in zip(single.get(clip).layers, threaded.get(clip).layers):
            assert_array_equal(x.data, y.data)


def test_cache_workers_exit_after_warming():
    encoder, _ = toy_parts()
    cache = FeatureCache(encoder, FrontendConfig(), FRAMES, thread_count=4)
    before = threading.active_count()
    cache.warm(gen_corpus(1, 6, split="train"))
    assert len(cache) == 6
    assert threading.active_count() == before


def split_text(tokens: TokenSequence):
    question = bytes(int(i) for i, r in zip(tokens.ids, tokens.roles) if r == Role.QUESTION and i < 256)
    answer = bytes(int(i) for i, r in zip(tokens.ids, tokens.roles) if r == Role.ANSWER and i < 256)
    return question.decode("utf-8"), answer.decode("utf-8")


def test_text_corpus_covers_the_whole_lexicon():
    vocab = TagVocabulary.create(6, 6, 3)
    clips = gen_corpus(0, 40, split="train")
    corpus = text_corpus(clips, vocab, seed=0)
    assert len(corpus) == 13 * len(clips)
    seen = {name for a in QUESTIONS for name in vocab.names(a)}
    unseen = {name for a in QUESTIONS for name in vocab.names(a, unseen=True)}
    sentence_names = set()
    for k, clip in enumerate(clips):
        block = [split_text(t) for t in corpus[13 * k : 13 * (k + 1)]]
        assert block[0] == (RAW_QUESTION, clip.caption)
        for a, attribute in enumerate(QUESTIONS):
            bare, sentence, context_bare, context_sentence = block[1 + 4 * a : 5 + 4 * a]
            index = clip.tag_ids()[attribute]
            forms = {vocab.names(attribute)[index], vocab.names(attribute, unseen=True)[index]}
            assert bare[1] in seen
            assert sentence[1].startswith("The answer is ") and sentence[1].endswith(".")
            sentence_names.add(sentence[1][len("The answer is ") : -1])
            assert context_bare[0].startswith("Tags: ") and context_bare[0] == context_sentence[0]
            assert context_bare[1] == vocab.names(attribute)[index]
            assert context_sentence[1] in {f"The answer is {name}." for name in forms}
            assert any(name in context_bare[0] for name in forms)
    assert sentence_names & unseen and sentence_names & seen


def test_text_pretraining_zero_steps_and_determinism():
    corpus = [encode_example("Q?", "rock"), encode_example("Q?", "jazz")]
    cfg = DecoderConfig(layers=1, width=8, heads=2, mlp_ratio=2.0, max_len=32)
    zero = pretrain_text(corpus, cfg, TextConfig(steps=0), OptimizerConfig(), seed=1, log_every=0)
    init = TextDecoder(cfg, make_rng(1, "text", "init")).state_dict()
    for name, value in zero.decoder.state_dict().items():
        assert_array_equal(value, init[name])
    a = pretrain_text(corpus, cfg, TextConfig(steps=3, batch_size=2), OptimizerConfig(lr=1e-2), seed=1, log_every=0)
    b = pretrain_text(corpus, cfg, TextConfig(steps=3, batch_size=2), OptimizerConfig(lr=1e-2), seed=1, log_every=0)
    assert a.losses == b.losses


@SLOW
def test_three_hundred_steps_halve_the_answer_loss():
    encoder, decoder = toy_parts(width=64, layers=4, heads=4, max_len=256)
    cfg = TrainConfig(steps=300, batch_size=4, lr=1e-3)
    model, partition = build_jmla(encoder, decoder, cfg.topology, ResamplerConfig(), 0)
    clips = gen_corpus(0, 64, split="train")
    cache = FeatureCache(encoder, FrontendConfig(), 128)
    result = run_schedule(cfg, model, partition, clips, cache, 0, log_every=0)
    losses = result.log.losses
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
