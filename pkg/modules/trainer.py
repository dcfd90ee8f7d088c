"""
Training schedules: text-decoder pretraining (the language model that is later
frozen) and JMLA prefix tuning with the four data modes.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from queue import Queue
from threading import Lock, Thread
from typing import Dict, List, Sequence, Tuple

import numpy as np

from modules.decoder import (
    DecoderConfig,
    JmlaModel,
    ParamPartition,
    TextDecoder,
    Variant,
    build_topology,
    partition_params,
)
from modules.frontend import FrontendConfig, Spectrogram, log_mel, standardize
from modules.mae import AudioEncoder, EncoderStack, encode_full
from modules.optim import AdamW, OptimizerConfig, TrainingDivergence, clip_grad_norm
from modules.resampler import ResamplerConfig
from modules.seeding import make_rng
from modules.synth import (
    QUESTIONS,
    RAW_QUESTION,
    DataMode,
    Example,
    SynthClip,
    TagVocabulary,
    TokenSequence,
    answer_sentence,
    encode_example,
    format_qa,
    render_waveform,
)
from modules.tensor import Tensor, TensorValueError, cross_entropy, no_grad


@dataclass
class TextConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("text.steps >= 0, text.batch_size >= 1, text.lr >= 0")


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    topology: str = Variant.DENSE_DEC.value
    data_mode: str = DataMode.GPT_QA.value
    finetune_steps: int = 0

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("train.steps и train.batch_size должны быть >= 1")
        Variant(self.topology)
        mode = DataMode(self.data_mode)
        if mode is DataMode.FINETUNE and self.finetune_steps < 1:
            raise ValueError("Режим Finetune требует train.finetune_steps >= 1")
        self.optimizer().validate()

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            clip_norm=self.clip_norm,
        )

    def phases(self) -> List[Tuple[DataMode, int]]:
        """(data mode, steps) per phase; finetune trains on Both first, then on GPT-QA only."""
        mode = DataMode(self.data_mode)
        if mode is DataMode.FINETUNE:
            return [(DataMode.BOTH, self.steps), (DataMode.GPT_QA, self.finetune_steps)]
        return [(mode, self.steps)]


def fit_length(tokens: TokenSequence, max_len: int) -> TokenSequence:
    if len(tokens) <= max_len:
        return tokens
    return TokenSequence(tokens.ids[:max_len], tokens.roles[:max_len])


def sequence_loss(logits: Tensor, tokens: TokenSequence) -> Tensor:
    """Mean NLL over the answer positions of one sequence."""
    return cross_entropy(logits, tokens.targets())


# ---------------------------------------------------------------- text pretraining

@dataclass
class TextPretrainResult:
    decoder: TextDecoder
    losses: List[float] = field(default_factory=list)


def _tag_context(clip: SynthClip, vocab: TagVocabulary, rng: np.random.Generator) -> str:
    """'Tags: <genre>, <instrument>, <tempo>. ' with each tag in its training or unseen form at random."""
    forms = []
    for attribute, index in clip.tag_ids().items():
        forms.append(vocab.names(attribute, unseen=bool(rng.integers(0, 2)))[index])
    return f"Tags: {', '.join(forms)}. "


def text_corpus(clips: Sequence[SynthClip], vocab: TagVocabulary, seed: int) -> List[TokenSequence]:
    """
    Captions plus question/answer lines over the whole tag lexicon. For every
    clip and attribute there are four lines:

    - bare answer without context: a random training name;
    - sentence answer without context: 'The answer is <random name>.' over
      training and unseen names;
    - bare answer after a 'Tags: ...' context: the training name of the
      clip's tag, whichever form the context used;
    - sentence answer after the same context: the training or unseen name
      of the clip's tag.

    Bare answers only ever carry training names; sentence answers carry both
    forms and bind each unseen name to its training name through the context.
    """
    rng = make_rng(seed, "text", "lexicon")
    corpus = []
    for clip in clips:
        corpus.append(encode_example(RAW_QUESTION, clip.caption))
        context = _tag_context(clip, vocab, rng)
        for attribute, questions in QUESTIONS.items():
            seen = vocab.names(attribute)
            both = seen + vocab.names(attribute, unseen=True)
            index = clip.tag_ids()[attribute]
            question = questions[int(rng.integers(0, len(questions)))]
            corpus.append(encode_example(question, seen[int(rng.integers(0, len(seen)))]))
            corpus.append(encode_example(question, answer_sentence(both[int(rng.integers(0, len(both)))])))
            corpus.append(encode_example(context + question, seen[index]))
            named = vocab.names(attribute, unseen=bool(rng.integers(0, 2)))[index]
            corpus.append(encode_example(context + question, answer_sentence(named)))
    return corpus


def pretrain_text(
    corpus: Sequence[TokenSequence],
    decoder_cfg: DecoderConfig,
    text_cfg: TextConfig,
    optimizer_cfg: OptimizerConfig,
    seed: int,
    log_every: int = 50,
) -> TextPretrainResult:
    if not corpus:
        raise ValueError("Пустой текстовый корпус")
    decoder = TextDecoder(decoder_cfg, make_rng(seed, "text", "init"))
    optimizer = AdamW(decoder.parameters(), optimizer_cfg)
    batch_rng = make_rng(seed, "text", "batch")
    batch_size = min(text_cfg.batch_size, len(corpus))
    corpus = [fit_length(t, decoder_cfg.max_len) for t in corpus]

    losses: List[float] = []
    for step in range(1, text_cfg.steps + 1):
        optimizer.zero_grad()
        total = 0.0
        try:
            for i in batch_rng.choice(len(corpus), size=batch_size, replace=False):
                loss = sequence_loss(decoder(corpus[i].ids), corpus[i])
                (loss * (1.0 / batch_size)).backward()
                total += loss.item() / batch_size
        except TensorValueError as e:
            raise TrainingDivergence(f"Предобучение декодера разошлось на шаге {step}: {e}") from e
        clip_grad_norm(optimizer.params, optimizer_cfg.clip_norm)
        optimizer.step()
        losses.append(total)
        if log_every and (step == 1 or step % log_every == 0):
            print(f"Текст шаг {step}/{text_cfg.steps}: потеря {total:.4f}")
    return TextPretrainResult(decoder, losses)


# ---------------------------------------------------------------- audio features

def clip_spectrogram(clip: SynthClip, frontend_cfg: FrontendConfig, frames: int) -> Spectrogram:
    return standardize(log_mel(render_waveform(clip, frontend_cfg, frames), frontend_cfg))


class FeatureCache:
    """Encoder stacks of the frozen audio encoder, computed once per clip."""

    def __init__(self, encoder: AudioEncoder, frontend_cfg: FrontendConfig, frames: int, thread_count: int = 1):
        self.encoder = encoder
        self.frontend_cfg = frontend_cfg
        self.frames = frames
        self.thread_count = max(1, thread_count)
        self._stacks: Dict[str, EncoderStack] = {}
        self._lock = Lock()

    def __len__(self):
        return len(self._stacks)

    def _encode(self, clip: SynthClip) -> EncoderStack:
        with no_grad():
            return encode_full(clip_spectrogram(clip, self.frontend_cfg, self.frames), self.encoder)

    def get(self, clip: SynthClip) -> EncoderStack:
        with self._lock:
            stack = self._stacks.get(clip.clip_id)
        if stack is None:
            stack = self._encode(clip)
            with self._lock:
                self._stacks[clip.clip_id] = stack
        return stack

    def handle_clips(self, q: Queue):
        """Thread worker function to encode queued clips until a None sentinel."""
        while True:
            clip = q.get()
            if clip is None:
                q.task_done()
                break
            try:
                self.get(clip)
            finally:
                q.task_done()

    def warm(self, clips: Sequence[SynthClip]):
        """Encode every clip not cached yet, on worker threads when thread_count > 1."""
        pending = [c for c in clips if c.clip_id not in self._stacks]
        if not pending:
            return
        if self.thread_count == 1:
            for clip in pending:
                self.get(clip)
            return
        queue = Queue()
        workers = []
        for _ in range(self.thread_count):
            t = Thread(target=self.handle_clips, args=(queue,))
            t.daemon = True
            t.start()
            workers.append(t)
        for clip in pending:
            queue.put(clip)
        queue.join()
        for _ in workers:
            queue.put(None)
        for t in workers:
            t.join()
        missing = [c.clip_id for c in pending if c.clip_id not in self._stacks]
        if missing:
            raise RuntimeError(f"Не удалось закодировать клипы: {missing[:5]}")


# ---------------------------------------------------------------- JMLA training

def build_jmla(
    encoder: AudioEncoder,
    decoder: TextDecoder,
    variant: str,
    resampler_cfg: ResamplerConfig,
    seed: int,
) -> Tuple[JmlaModel, ParamPartition]:
    topology = build_topology(variant, encoder.depth, decoder.depth)
    model = JmlaModel(encoder, decoder, topology, resampler_cfg, make_rng(seed, "jmla", "init"))
    return model, partition_params(model, topology)


@dataclass
class TrainItem:
    example: Example
    tokens: TokenSequence
    stack: EncoderStack


def train_step(
    batch: Sequence[TrainItem],
    model: JmlaModel,
    partition: ParamPartition,
    optimizer: AdamW,
    clip_norm: float,
) -> float:
    """Teacher-forced loss on answer tokens, backward, clipped update of the trainable set."""
    if not batch:
        raise ValueError("Пустой батч")
    optimizer.zero_grad()
    total = 0.0
    try:
        for item in batch:
            logits = model.decoder_forward(item.tokens, model.summarize(item.stack))
            loss = sequence_loss(logits, item.tokens)
            (loss * (1.0 / len(batch))).backward()
            total += loss.item() / len(batch)
    except TensorValueError as e:
        raise TrainingDivergence(f"Нечисловая потеря: {e}") from e
    clip_grad_norm(partition.trainable, clip_norm)
    optimizer.step()
    return total


@dataclass
class StepRecord:
    step: int
    loss: float
    gates: Dict[str, float]
    param_norm: float
    data_mode: str
    example_ids: List[str]


@dataclass
class TrainLog:
    records: List[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def example_ids(self) -> List[str]:
        return [eid for r in self.records for eid in r.example_ids]

    def export_jsonl(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(asdict(record), ensure_ascii=False, sort_keys=True) + "\n")


class ExampleSampler:
    """Seeded draws of distinct examples per step."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def draw(self, examples: Sequence[Example], batch_size: int) -> List[Example]:
        picks = self.rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        return [examples[i] for i in picks]


@dataclass
class ScheduleResult:
    log: TrainLog
    steps: int
    rng_state: Dict


def trainable_norm(partition: ParamPartition) -> float:
    return float(np.sqrt(sum(float((p.data * p.data).sum()) for p in partition.trainable.values())))


def run_schedule(
    cfg: TrainConfig,
    model: JmlaModel,
    partition: ParamPartition,
    clips: Sequence[SynthClip],
    cache: FeatureCache,
    seed: int,
    paraphrases: bool = False,
    log_every: int = 50,
) -> ScheduleResult:
    """Run every phase of the configured data schedule with one optimizer."""
    if not clips:
        raise ValueError("Пустой обучающий корпус")
    optimizer = AdamW(partition.trainable, cfg.optimizer())
    sampler = ExampleSampler(make_rng(seed, "jmla", "batch"))
    by_clip = {clip.clip_id: clip for clip in clips}
    max_len = model.decoder.config.max_len
    cache.warm(clips)

    log = TrainLog()
    step = 0
    for mode, phase_steps in cfg.phases():
        examples = [e for clip in clips for e in format_qa(clip, mode, paraphrases)]
        print(f"📊 Фаза {mode.value}: {len(examples)} примеров, {phase_steps} шагов")
        for _ in range(phase_steps):
            step += 1
            drawn = sampler.draw(examples, cfg.batch_size)
            batch = [TrainItem(e, fit_length(e.tokens(), max_len), cache.get(by_clip[e.clip_id])) for e in drawn]
            try:
                loss = train_step(batch, model, partition, optimizer, cfg.clip_norm)
            except TrainingDivergence as e:
                raise TrainingDivergence(f"Шаг {step}: {e}") from e
            log.records.append(
                StepRecord(
                    step=step,
                    loss=loss,
                    gates=model.gates(),
                    param_norm=trainable_norm(partition),
                    data_mode=mode.value,
                    example_ids=[e.example_id for e in drawn],
                )
            )
            if log_every and (step == 1 or step % log_every == 0):
                print(f"JMLA шаг {step}: потеря {loss:.4f}, режим {mode.value}")
    return ScheduleResult(log, step, sampler.rng.bit_generator.state)
