"""
Command implementations: each PipelineManager method runs one stage end to
end, prints progress and returns True on success, False on any failure.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from modules.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from modules.decoder import (
    DecoderConfig,
    InjectionTopology,
    JmlaModel,
    TextDecoder,
    build_topology,
    partition_params,
)
from modules.evaluation import (
    EvalReport,
    ZeroShotEvaluator,
    print_summary,
    rank_and_predict,
    save_report_html,
    save_report_jsonl,
)
from modules.frontend import FrontendConfig, Spectrogram, log_mel, patchify, read_wav, standardize
from modules.mae import AudioEncoder, MaeConfig, encode_full, pretrain_mae
from modules.optim import OptimizerConfig
from modules.resampler import ResamplerConfig, count_cross_flops
from modules.seeding import make_rng
from modules.synth import (
    QUESTIONS,
    SynthClip,
    TagVocabulary,
    encode_example,
    export_corpus,
    gen_corpus,
)
from modules.tensor import Tensor, cross_entropy, finite_diff_check
from modules.trainer import (
    FeatureCache,
    build_jmla,
    clip_spectrogram,
    pretrain_text,
    run_schedule,
    text_corpus,
)


@dataclass
class GradcheckConfig:
    """Toy model for the finite-difference sweep; max_entries = 0 checks every parameter entry."""

    tolerance: float = 1e-4
    eps: float = 1e-5
    max_entries: int = 0
    width: int = 8
    layers: int = 2
    frames: int = 32
    bins: int = 16
    gate: float = 0.5
    question: str = "Genre?"
    answer: str = "rock"

    def validate(self):
        if self.tolerance <= 0 or self.eps <= 0:
            raise ValueError("gradcheck.tolerance и gradcheck.eps должны быть положительными")
        if self.width % 2 or self.layers < 1 or self.frames % 16 or self.bins % 16:
            raise ValueError("gradcheck.width чётное, layers >= 1, frames и bins кратны 16")
        if self.max_entries < 0:
            raise ValueError("gradcheck.max_entries >= 0 (0 - проверять все элементы)")


@dataclass
class BenchConfig:
    patches: str = "16,32,64,128"
    text_len: int = 32

    @property
    def patch_list(self) -> List[int]:
        return [int(p) for p in self.patches.split(",") if p.strip()]

    def validate(self):
        if not self.patch_list or min(self.patch_list) < 1 or self.text_len < 1:
            raise ValueError("bench.patches - положительные целые через запятую, bench.text_len >= 1")


# ---------------------------------------------------------------- gradient check

def gradcheck_model(cfg: GradcheckConfig, variant: str, seed: int) -> Tuple[JmlaModel, np.ndarray]:
    """Toy JMLA with nonzero gates and every parameter (frozen encoder included) tracking gradients."""
    rng = make_rng(seed, "gradcheck")
    heads = 2
    encoder = AudioEncoder(
        MaeConfig(encoder_layers=cfg.layers, width=cfg.width, heads=heads, mlp_ratio=2.0, decoder_width=cfg.width, decoder_heads=heads),
        rng,
    )
    max_len = len(encode_example(cfg.question, cfg.answer))
    decoder = TextDecoder(DecoderConfig(layers=cfg.layers, width=cfg.width, heads=heads, mlp_ratio=2.0, max_len=max_len), rng)
    resampler_cfg = ResamplerConfig(latents=2, depth=1, heads=heads, mlp_ratio=2.0)
    model = JmlaModel(encoder, decoder, build_topology(variant, cfg.layers, cfg.layers), resampler_cfg, rng)
    for block in model.cross_blocks.values():
        block.gate.data[...] = cfg.gate
    model.set_requires_grad(True)
    spectrogram = rng.normal(size=(cfg.frames, cfg.bins))
    return model, spectrogram


def run_gradcheck(cfg: GradcheckConfig, variant: str, seed: int) -> float:
    """Max relative error between autodiff and central differences over the assembled toy model."""
    model, values = gradcheck_model(cfg, variant, seed)
    tokens = encode_example(cfg.question, cfg.answer)
    spectrogram = Spectrogram(values)

    def loss(_params) -> Tensor:
        summaries = model.summarize(encode_full(spectrogram, model.encoder))
        return cross_entropy(model.decoder_forward(tokens, summaries), tokens.targets())

    return finite_diff_check(loss, model.parameters(), eps=cfg.eps, max_entries=cfg.max_entries or None)


# ---------------------------------------------------------------- manager

class PipelineManager:
    def __init__(self, config):
        self.config = config

    # -------- helpers

    @property
    def seed(self) -> int:
        return self.config.run.seed

    def _vocab(self) -> TagVocabulary:
        data = self.config.data
        return TagVocabulary.create(data.n_genres, data.n_instruments, data.n_tempos)

    def _corpus(self, split: str) -> List[SynthClip]:
        data = self.config.data
        return gen_corpus(
            self.seed,
            data.n_clips if split == "train" else data.n_eval_clips,
            (data.n_genres, data.n_instruments, data.n_tempos),
            split=split,
            holdout_every=data.holdout_every,
            n_distractors=data.distractors,
        )

    def _archive_config(self):
        os.makedirs(self.config.run.output_directory, exist_ok=True)
        self.config.dump(self.config.path_for("run_config.env"))

    def _header(self, stage: str, sections: List[str], **provenance) -> Dict:
        return {
            "config": {name: asdict(getattr(self.config, name)) for name in sections},
            "provenance": {"stage": stage, "seed": self.seed, **provenance},
        }

    def _restore(self, filename: str, section: str) -> Checkpoint:
        path = self.config.path_for(filename)
        checkpoint = load_checkpoint(path)
        stored = checkpoint.config.get(section)
        if stored != asdict(getattr(self.config, section)):
            raise CheckpointError(f"Секция [{section}] в {path} не совпадает с текущей конфигурацией")
        return checkpoint

    def _load_encoder(self) -> AudioEncoder:
        checkpoint = self._restore(self.config.run.mae_checkpoint, "mae")
        encoder = AudioEncoder(self.config.mae, make_rng(self.seed, "mae", "init"))
        encoder.load_state_dict(checkpoint.subset("encoder"))
        return encoder

    def _load_decoder(self) -> TextDecoder:
        checkpoint = self._restore(self.config.run.text_checkpoint, "decoder")
        decoder = TextDecoder(self.config.decoder, make_rng(self.seed, "text", "init"))
        decoder.load_state_dict(checkpoint.subset("decoder"))
        return decoder

    def load_model(self) -> JmlaModel:
        """Rebuild the trained JMLA model from its checkpoint."""
        checkpoint = self._restore(self.config.run.jmla_checkpoint, "decoder")
        if checkpoint.config.get("mae") != asdict(self.config.mae):
            raise CheckpointError("Секция [mae] чекпоинта JMLA не совпадает с текущей конфигурацией")
        topology = InjectionTopology.parse(checkpoint.topology)
        resampler_cfg = ResamplerConfig(**checkpoint.config["resampler"])
        rng = make_rng(self.seed, "jmla", "init")
        model = JmlaModel(
            AudioEncoder(self.config.mae, rng),
            TextDecoder(self.config.decoder, rng),
            topology,
            resampler_cfg,
            rng,
        )
        model.load_state_dict(checkpoint.params)
        partition_params(model, topology)
        return model

    # -------- commands

    def pretrain_text(self) -> bool:
        try:
            self._archive_config()
            vocab = self._vocab()
            train_clips, eval_clips = self._corpus("train"), self._corpus("eval")
            export_corpus(train_clips, vocab, self.config.path_for("corpus_train.jsonl"))
            export_corpus(eval_clips, vocab, self.config.path_for("corpus_eval.jsonl"))
            corpus = text_corpus(train_clips, vocab, self.seed)
            print(f"📊 Текстовый корпус: {len(corpus)} последовательностей")

            text = self.config.text
            result = pretrain_text(
                corpus,
                self.config.decoder,
                text,
                OptimizerConfig(lr=text.lr, clip_norm=self.config.train.clip_norm),
                self.seed,
                self.config.run.log_every,
            )
            path = self.config.path_for(self.config.run.text_checkpoint)
            save_checkpoint(
                path,
                result.decoder.parameters(prefix="decoder."),
                self._header("pretrain-text", ["decoder", "text", "data"], steps=text.steps,
                             final_loss=result.losses[-1] if result.losses else None),
            )
            self._save_losses(result.losses, "text_losses.jsonl")
            print(f"\n✅ Языковая модель обучена, чекпоинт: {path}")
            return True
        except Exception as e:
            print(f"❌ Ошибка предобучения декодера: {e}")
            return False

    def pretrain_mae(self) -> bool:
        try:
            self._archive_config()
            clips = self._corpus("train")
            frontend, frames = self.config.frontend, self.config.data.frames
            dataset = [patchify(clip_spectrogram(clip, frontend, frames)) for clip in clips]
            print(f"📊 Набор MAE: {len(dataset)} клипов по {dataset[0].count} патчей")

            mae = self.config.mae
            result = pretrain_mae(
                dataset,
                mae,
                OptimizerConfig(lr=mae.lr, clip_norm=self.config.train.clip_norm),
                self.seed,
                self.config.run.log_every,
            )
            path = self.config.path_for(self.config.run.mae_checkpoint)
            save_checkpoint(
                path,
                result.encoder.parameters(prefix="encoder."),
                self._header("pretrain-mae", ["mae", "frontend", "data"], steps=mae.steps,
                             final_loss=result.losses[-1] if result.losses else None),
            )
            self._save_losses(result.losses, "mae_losses.jsonl")
            print(f"\n✅ Энкодер MAE обучен, чекпоинт: {path}")
            return True
        except Exception as e:
            print(f"❌ Ошибка предобучения MAE: {e}")
            return False

    def train_jmla(self) -> bool:
        try:
            self._archive_config()
            encoder, decoder = self._load_encoder(), self._load_decoder()
            train = self.config.train
            model, partition = build_jmla(encoder, decoder, train.topology, self.config.resampler, self.seed)
            print(f"Топология: {model.topology.describe()}")
            print(
                f"Параметры: {partition.trainable_count} обучаемых "
                f"({partition.resamplers} ресэмплеров, {partition.cross_blocks} блоков), "
                f"{partition.frozen_count} замороженных"
            )
            before = partition.checksums()

            clips = self._corpus("train")
            cache = FeatureCache(encoder, self.config.frontend, self.config.data.frames, self.config.run.thread_count)
            result = run_schedule(
                train,
                model,
                partition,
                clips,
                cache,
                self.seed,
                self.config.data.paraphrase_questions,
                self.config.run.log_every,
            )
            if partition.checksums()["frozen"] != before["frozen"]:
                raise RuntimeError("Замороженные параметры изменились во время обучения")

            result.log.export_jsonl(self.config.path_for("train_log.jsonl"))
            path = self.config.path_for(self.config.run.jmla_checkpoint)
            header = self._header(
                "train",
                ["mae", "decoder", "resampler", "train", "data", "frontend"],
                steps=result.steps,
                data_mode=train.data_mode,
            )
            header["topology"] = model.topology.describe()
            header["rng_state"] = result.rng_state
            save_checkpoint(path, model.parameters(), header)
            print(f"\n✅ JMLA обучена за {result.steps} шагов, финальная потеря {result.log.losses[-1]:.4f}")
            print(f"Чекпоинт: {path}")
            return True
        except Exception as e:
            print(f"❌ Ошибка обучения JMLA: {e}")
            return False

    def evaluate(self, wav_path: str = None) -> bool:
        try:
            model = self.load_model()
            print(f"Топология: {model.topology.describe()}")
            if wav_path:
                return self._evaluate_wav(model, wav_path)

            self._archive_config()
            vocab = self._vocab()
            clips = self._corpus("eval")
            cfg = self.config.eval
            cache = FeatureCache(model.encoder, self.config.frontend, self.config.data.frames, self.config.run.thread_count)
            evaluator = ZeroShotEvaluator(model, cache, vocab, self.config.run.thread_count, cfg.normalize)

            reports: List[EvalReport] = []
            for task in cfg.task_list:
                if task == "tagging":
                    print("🧪 Мульти-лейбл тегирование...")
                    reports.append(evaluator.tag(clips, cfg.unseen))
                    continue
                for strategy in cfg.strategy_list:
                    print(f"🧪 {task}: {strategy.value}...")
                    reports.append(evaluator.classify(clips, task, strategy, cfg.unseen))

            formats = self.config.run.export_formats
            if "json" in formats:
                for report in reports:
                    save_report_jsonl(report, self.config.path_for(f"eval_{report.task}_{report.strategy}.jsonl"))
            if "html" in formats:
                save_report_html(reports, self.config.path_for("eval_report.html"))
            print_summary(reports)
            return True
        except Exception as e:
            print(f"❌ Ошибка оценки: {e}")
            return False

    def _evaluate_wav(self, model: JmlaModel, wav_path: str) -> bool:
        frontend = self.config.frontend
        spectrogram = standardize(log_mel(read_wav(wav_path), frontend))
        summaries = model.summarize(encode_full(spectrogram, model.encoder))
        vocab = self._vocab()
        print(f"Файл: {wav_path} ({spectrogram.valid_frames} кадров)")
        for attribute in ("genre", "instrument", "tempo"):
            candidates = vocab.names(attribute, self.config.eval.unseen)
            prediction, scores = rank_and_predict(
                summaries, QUESTIONS[attribute][0], candidates, model, self.config.eval.normalize
            )
            ranked = sorted(scores, key=lambda s: (-s.value, s.candidate))
            print(f"{attribute}: {prediction}")
            for score in ranked:
                print(f"    {score.candidate:<12} {score.value:.4f}")
        return True

    def bench(self) -> bool:
        try:
            bench = self.config.bench
            L, D = self.config.resampler.latents, self.config.decoder.width
            D_enc, depth = self.config.mae.width, self.config.resampler.depth
            rows = []
            print(f"{'P':>6} {'resampler':>12} {'decoder':>12} {'naive':>14}")
            for P in bench.patch_list:
                flops = count_cross_flops(P, L, D, D_enc, depth, bench.text_len)
                rows.append({"patches": P, **asdict(flops)})
                print(f"{P:>6} {flops.resampler_total:>12} {flops.decoder_cross:>12} {flops.naive_prefix:>14}")
            if len({r["decoder_cross"] for r in rows}) != 1:
                raise RuntimeError("Стоимость кросс-внимания декодера зависит от P")

            os.makedirs(self.config.run.output_directory, exist_ok=True)
            with open(self.config.path_for("bench.jsonl"), "w", encoding="utf-8") as f:
                for row in rows:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
            print("\n✅ Стоимость кросс-внимания декодера не зависит от длины аудио")
            return True
        except Exception as e:
            print(f"❌ Ошибка бенчмарка: {e}")
            return False

    def gradcheck(self) -> bool:
        try:
            cfg = self.config.gradcheck
            print(f"🧪 Проверка градиентов: ширина {cfg.width}, слоёв {cfg.layers}, eps {cfg.eps}")
            error = run_gradcheck(cfg, self.config.train.topology, self.seed)
            print(f"Максимальная относительная ошибка: {error:.3e} (допуск {cfg.tolerance:.0e})")
            if error >= cfg.tolerance:
                print("❌ Градиенты расходятся с конечными разностями")
                return False
            print("✅ Градиенты совпадают с конечными разностями")
            return True
        except Exception as e:
            print(f"❌ Ошибка проверки градиентов: {e}")
            return False

    def _save_losses(self, losses: List[float], filename: str):
        with open(self.config.path_for(filename), "w", encoding="utf-8") as f:
            for step, loss in enumerate(losses, start=1):
                f.write(json.dumps({"step": step, "loss": loss}) + "\n")
