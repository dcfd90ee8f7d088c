#!/usr/bin/env python3
"""
Tests for configuration loading and the command-line stages.
"""

import json
import os

import pytest
import soundfile as sf

from config.settings import Config, ConfigError
from main import main
from report_to_html import main as report_to_html
from modules.frontend import FrontendConfig
from modules.synth import gen_corpus, render_waveform

TINY_CONFIG = """\
run.log_every = 0
data.n_clips = 4
data.n_eval_clips = 3
data.n_genres = 3
data.n_instruments = 3
data.n_tempos = 2
data.frames = 16
mae.encoder_layers = 2
mae.width = 8
mae.heads = 2
mae.decoder_width = 8
mae.decoder_heads = 2
mae.steps = 2
mae.batch_size = 2
resampler.latents = 2
resampler.depth = 1
resampler.heads = 2
decoder.layers = 2
decoder.width = 8
decoder.heads = 2
text.steps = 2
text.batch_size = 2
train.steps = 2
train.batch_size = 2
eval.tasks = genre,tagging
eval.strategies = PromptAllCandidates,PromptTagsListOneWord
"""


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("JMLA_CONFIG", "JMLA_OUTPUT_DIRECTORY", "JMLA_THREAD_COUNT"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.env"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


def test_defaults_validate():
    config = Config()
    assert config.train.topology == "DenseDec"
    assert config.mae.mask_ratio == 0.75
    assert config.eval.normalize is True


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        Config(overrides={"train.stepz": "1"})
    with pytest.raises(ConfigError):
        Config(overrides={"model.width": "1"})
    path = tmp_path / "typo.env"
    path.write_text("decoder.widht = 8\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        Config(str(path))


def test_bad_values_are_rejected():
    with pytest.raises(ConfigError):
        Config(overrides={"train.steps": "many"})
    with pytest.raises(ConfigError):
        Config(overrides={"eval.normalize": "yes"})
    with pytest.raises(ConfigError):
        Config(overrides={"mae.mask_ratio": "1.5"})
    with pytest.raises(ConfigError):
        Config(overrides={"train.topology": "DenseEncDec", "mae.encoder_layers": "2"})


def test_precedence_file_env_overrides(tmp_path, monkeypatch):
    path = tmp_path / "run.env"
    path.write_text("run.thread_count = 2\nrun.seed = 5\ntrain.data_mode = Both\n", encoding="utf-8")
    monkeypatch.setenv("JMLA_THREAD_COUNT", "3")
    config = Config(str(path), {"run.seed": "9"})
    assert config.run.thread_count == 3
    assert config.run.seed == 9
    assert config.train.data_mode == "Both"


def test_dump_round_trips(tmp_path):
    config = Config(overrides={"train.lr": "0.002", "data.paraphrase_questions": "true"})
    path = tmp_path / "dump.env"
    config.dump(str(path))
    assert Config(str(path)).as_dict() == config.as_dict()


def test_bench_command(tmp_path):
    assert main(["bench", "--out", str(tmp_path)]) is True
    rows = [json.loads(line) for line in (tmp_path / "bench.jsonl").read_text().splitlines()]
    assert [r["patches"] for r in rows] == [16, 32, 64, 128]
    assert len({r["decoder_cross"] for r in rows}) == 1


def test_gradcheck_command(tmp_path):
    path = tmp_path / "sampled.env"
    path.write_text("gradcheck.max_entries = 3\n", encoding="utf-8")
    assert main(["gradcheck", "--config", str(path), "--out", str(tmp_path)]) is True


def test_gradcheck_fails_above_tolerance(tmp_path):
    path = tmp_path / "strict.env"
    path.write_text("gradcheck.tolerance = 1e-30\ngradcheck.max_entries = 1\n", encoding="utf-8")
    assert main(["gradcheck", "--config", str(path), "--out", str(tmp_path)]) is False


def test_gradcheck_defaults_sweep_every_entry():
    config = Config()
    assert config.gradcheck.max_entries == 0
    assert config.gradcheck.layers >= 2


def test_downstream_stages_need_checkpoints(tmp_path, tiny_config):
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path)]) is False
    assert main(["eval", "--config", tiny_config, "--out", str(tmp_path)]) is False


def test_corrupt_checkpoint_is_reported(tmp_path, tiny_config):
    (tmp_path / "text_decoder.jmla").write_bytes(b"JMLA\x01")
    (tmp_path / "mae_encoder.jmla").write_bytes(b"garbage")
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path)]) is False


def test_missing_config_file_fails(tmp_path):
    assert main(["bench", "--config", str(tmp_path / "absent.env")]) is False


def test_full_pipeline(tmp_path, tiny_config):
    out = str(tmp_path / "run")
    for command in ("pretrain-text", "pretrain-mae", "train", "eval"):
        assert main([command, "--config", tiny_config, "--out", out]) is True, command

    produced = set(os.listdir(out))
    for name in (
        "run_config.env",
        "corpus_train.jsonl",
        "corpus_eval.jsonl",
        "text_decoder.jmla",
        "mae_encoder.jmla",
        "jmla.jmla",
        "train_log.jsonl",
        "eval_genre_PromptAllCandidates.jsonl",
        "eval_genre_PromptTagsListOneWord.jsonl",
        "eval_tagging_PromptAllCandidates.jsonl",
    ):
        assert name in produced, name

    summary = json.loads(open(os.path.join(out, "eval_genre_PromptAllCandidates.jsonl"), encoding="utf-8").readline())
    assert summary["type"] == "summary" and 0.0 <= summary["accuracy"] <= 1.0
    assert report_to_html([os.path.join(out, "eval_genre_PromptAllCandidates.jsonl")]) is True
    assert os.path.exists(os.path.join(out, "eval_genre_PromptAllCandidates.html"))

    wav = tmp_path / "clip.wav"
    frontend = FrontendConfig()
    clip = gen_corpus(0, 1, sizes=(3, 3, 2))[0]
    sf.write(str(wav), render_waveform(clip, frontend, 40).samples, frontend.sample_rate, subtype="PCM_16")
    assert main(["eval", "--config", tiny_config, "--out", out, "--wav", str(wav)]) is True


def test_same_seed_gives_identical_artifacts(tmp_path, tiny_config):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        for command in ("pretrain-text", "pretrain-mae", "train", "eval"):
            assert main([command, "--config", tiny_config, "--out", str(out), "--seed", "4"]) is True, command
    for name in (
        "text_decoder.jmla",
        "text_losses.jsonl",
        "corpus_train.jsonl",
        "mae_encoder.jmla",
        "mae_losses.jsonl",
        "jmla.jmla",
        "train_log.jsonl",
        "eval_genre_PromptAllCandidates.jsonl",
        "eval_genre_PromptTagsListOneWord.jsonl",
        "eval_tagging_PromptAllCandidates.jsonl",
    ):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
