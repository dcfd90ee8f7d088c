"""
Byte-level tokenizer, synthetic music-caption corpus with ground-truth tags,
question-answer formatting of captions and zero-shot prompt construction.
"""

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.frontend import FrontendConfig, Waveform
from modules.seeding import make_rng

PAD = 256
SOS = 257
EOS = 258
SEP = 259
VOCAB_SIZE = 260
IGNORE_ID = -100

RAW_QUESTION = "Describe the music."
ANSWER_LEAD = "The answer is "


class Role(IntEnum):
    QUESTION = 0
    ANSWER = 1
    PAD = 2


class DataMode(str, Enum):
    RAW_CAPTION = "RawCaption"
    GPT_QA = "GPT-QA"
    BOTH = "Both"
    FINETUNE = "Finetune"


# ---------------------------------------------------------------- tokenizer

@dataclass
class TokenSequence:
    ids: np.ndarray
    roles: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int64)
        if self.ids.shape != self.roles.shape:
            raise ValueError("ids и roles должны иметь одинаковую длину")

    def __len__(self):
        return self.ids.size

    def targets(self) -> np.ndarray:
        """Next-token targets; only answer positions count, everything else is IGNORE_ID."""
        out = np.full(self.ids.size, IGNORE_ID, dtype=np.int64)
        answer = self.roles[1:] == Role.ANSWER
        out[:-1][answer] = self.ids[1:][answer]
        return out

    def padded(self, length: int) -> "TokenSequence":
        """Right-pad with PAD ids and PAD roles up to `length`; longer sequences come back unchanged."""
        extra = length - self.ids.size
        if extra <= 0:
            return self
        return TokenSequence(
            np.concatenate([self.ids, np.full(extra, PAD)]),
            np.concatenate([self.roles, np.full(extra, Role.PAD)]),
        )


def _text_bytes(text: Union[str, bytes]) -> bytes:
    """UTF-8 bytes of a string; bytes pass through untouched."""
    return text if isinstance(text, bytes) else text.encode("utf-8", errors="surrogateescape")


def tokenize(text: Union[str, bytes]) -> TokenSequence:
    """[SOS] bytes [EOS]; every position after SOS is an answer position."""
    ids = [SOS, *_text_bytes(text), EOS]
    roles = [Role.QUESTION] + [Role.ANSWER] * (len(ids) - 1)
    return TokenSequence(np.array(ids), np.array(roles))


def detokenize(ids: Sequence[int], as_bytes: bool = False) -> Union[str, bytes]:
    """Inverse of tokenize; special ids are dropped."""
    data = bytes(int(i) for i in ids if 0 <= int(i) < 256)
    return data if as_bytes else data.decode("utf-8", errors="surrogateescape")


def encode_example(question: str, answer: str) -> TokenSequence:
    """[SOS] question [SEP] answer [EOS] with the loss restricted to the answer and EOS."""
    q, a = _text_bytes(question), _text_bytes(answer)
    ids = [SOS, *q, SEP, *a, EOS]
    roles = [Role.QUESTION] * (len(q) + 2) + [Role.ANSWER] * (len(a) + 1)
    return TokenSequence(np.array(ids), np.array(roles))


def encode_prompt(prompt: str) -> np.ndarray:
    """Decoder input for free generation: [SOS] prompt [SEP]."""
    return np.array([SOS, *_text_bytes(prompt), SEP], dtype=np.int64)


# ---------------------------------------------------------------- tag vocabulary

GENRES = ["rock", "jazz", "blues", "funk", "metal", "disco"]
INSTRUMENTS = ["guitar", "piano", "violin", "organ", "harp", "trumpet"]
TEMPOS = ["slow", "medium", "fast"]
# Unseen synonyms share no leading byte with any training name of the same attribute.
GENRES_UNSEEN = ["grunge", "swing", "lament", "uptown", "thrash", "hustle"]
INSTRUMENTS_UNSEEN = ["axe", "keys", "fiddle", "bellows", "lyre", "cornet"]
TEMPOS_UNSEEN = ["largo", "andante", "presto"]

# Genre: long-range structure (rhythm over an 8-step bar, arpeggio shape, note length).
GENRE_PATTERNS = [
    {"steps": [0, 2, 4, 6], "intervals": [0, 7, 12, 7], "decay": 0.10, "base": 57},
    {"steps": [0, 3, 5], "intervals": [0, 4, 7, 10], "decay": 0.30, "base": 60},
    {"steps": [0, 3, 4, 7], "intervals": [0, 3, 5, 6, 7], "decay": 0.20, "base": 55},
    {"steps": [0, 1, 3, 6], "intervals": [0, 0, 12, 10], "decay": 0.05, "base": 52},
    {"steps": [0, 1, 2, 3, 4, 5, 6, 7], "intervals": [0, 1, 0, -2], "decay": 0.04, "base": 50},
    {"steps": [0, 2, 4, 6], "intervals": [0, 12, 0, 12], "decay": 0.14, "base": 64},
]
# Instrument: local spectrum (relative amplitude of harmonics 1..8).
INSTRUMENT_HARMONICS = [
    [1.0, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02],
    [1.0, 0.3, 0.1, 0.05, 0.02, 0.0, 0.0, 0.0],
    [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3],
    [1.0, 0.0, 0.8, 0.0, 0.6, 0.0, 0.4, 0.0],
    [1.0, 0.1, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.4, 0.8, 1.0, 0.9, 0.7, 0.5, 0.3, 0.2],
]
TEMPO_STEP_SECONDS = [0.16, 0.11, 0.07]

QUESTIONS = {
    "genre": ["What is the genre of the music?", "Which genre does this track belong to?", "What style of music is this?"],
    "instrument": ["What instrument is playing?", "Which instrument leads this track?"],
    "tempo": ["What is the tempo of the music?", "How fast is this music?"],
}
NOUNS = {"genre": "genres", "instrument": "instruments", "tempo": "tempos"}

DISTRACTORS = [
    "The label was founded in a small basement studio decades ago.",
    "Critics at the time compared the release to the great records of the previous era.",
    "The band toured extensively across Europe before recording this session.",
    "Liner notes credit three different producers and an uncredited engineer.",
    "This recording was reissued on vinyl after a long out-of-print period.",
    "The composer reportedly wrote the piece during a single rainy weekend.",
    "Several radio stations refused to play the single on its first release.",
    "The studio later became famous for hosting many well known artists.",
    "A documentary about the making of the album appeared years later.",
    "Original pressings are now sought after by collectors worldwide.",
    "The cover artwork was painted by a friend of the drummer.",
    "Early reviews focused more on the lyrics than on the arrangement.",
]


@dataclass
class TagVocabulary:
    """Recipe indices with two name sets: names used in training answers and unseen names for zero-shot evaluation."""

    genres: List[str]
    instruments: List[str]
    tempos: List[str]
    genres_unseen: List[str]
    instruments_unseen: List[str]
    tempos_unseen: List[str]

    @classmethod
    def create(cls, n_genres: int, n_instruments: int, n_tempos: int) -> "TagVocabulary":
        """First n names of each attribute; every attribute needs at least two classes."""
        sizes = {"genre": (n_genres, GENRES), "instrument": (n_instruments, INSTRUMENTS), "tempo": (n_tempos, TEMPOS)}
        for name, (n, names) in sizes.items():
            if not 2 <= n <= len(names):
                raise ValueError(f"Размер словаря '{name}' должен быть от 2 до {len(names)}: {n}")
        return cls(
            GENRES[:n_genres], INSTRUMENTS[:n_instruments], TEMPOS[:n_tempos],
            GENRES_UNSEEN[:n_genres], INSTRUMENTS_UNSEEN[:n_instruments], TEMPOS_UNSEEN[:n_tempos],
        )

    def names(self, attribute: str, unseen: bool = False) -> List[str]:
        """Names of one attribute, indexed by recipe id."""
        return list(getattr(self, f"{attribute}s_unseen" if unseen else f"{attribute}s"))

    def all_tags(self, unseen: bool = False) -> List[str]:
        """Genre and instrument names together, the candidate set of the tagging task."""
        return self.names("genre", unseen) + self.names("instrument", unseen)


@dataclass
class DataConfig:
    n_clips: int = 64
    n_eval_clips: int = 48
    n_genres: int = 6
    n_instruments: int = 6
    n_tempos: int = 3
    frames: int = 128
    distractors: int = 2
    holdout_every: int = 4
    paraphrase_questions: bool = False

    def validate(self):
        if self.n_clips < 1 or self.n_eval_clips < 1:
            raise ValueError("n_clips и n_eval_clips должны быть >= 1")
        if self.frames < 16 or self.frames % 16:
            raise ValueError(f"frames должно быть кратно 16: {self.frames}")
        if self.holdout_every < 2:
            raise ValueError("holdout_every должно быть >= 2")
        TagVocabulary.create(self.n_genres, self.n_instruments, self.n_tempos)


# ---------------------------------------------------------------- clips

@dataclass
class SynthClip:
    clip_id: str
    seed: int
    genre: int
    instrument: int
    tempo: int
    caption: str
    qa_pairs: List[Tuple[str, str]] = field(default_factory=list)
    split: str = "train"

    def tag_ids(self) -> Dict[str, int]:
        return {"genre": self.genre, "instrument": self.instrument, "tempo": self.tempo}

    def to_record(self, vocab: TagVocabulary) -> Dict:
        """JSON-ready record; tags are written with their training names."""
        return {
            "clip_id": self.clip_id,
            "seed": self.seed,
            "split": self.split,
            "tags": {k: vocab.names(k)[v] for k, v in self.tag_ids().items()},
            "tag_ids": self.tag_ids(),
            "caption": self.caption,
            "qa": [list(pair) for pair in self.qa_pairs],
        }

    @classmethod
    def from_record(cls, record: Dict) -> "SynthClip":
        ids = record["tag_ids"]
        return cls(
            clip_id=record["clip_id"],
            seed=int(record["seed"]),
            genre=int(ids["genre"]),
            instrument=int(ids["instrument"]),
            tempo=int(ids["tempo"]),
            caption=record["caption"],
            qa_pairs=[(q, a) for q, a in record["qa"]],
            split=record.get("split", "train"),
        )


def is_holdout_combo(genre: int, instrument: int, tempo: int, holdout_every: int) -> bool:
    """Combinations reserved for evaluation clips; training never draws them."""
    return (genre + instrument + tempo) % holdout_every == 0


def _caption(genre: str, instrument: str, tempo: str, rng: np.random.Generator, n_distractors: int) -> str:
    """Core tag sentence dropped at a random position among unrelated distractor sentences."""
    core = f"A {tempo} {genre} track led by the {instrument}."
    picks = rng.choice(len(DISTRACTORS), size=min(n_distractors, len(DISTRACTORS)), replace=False)
    sentences = [DISTRACTORS[i] for i in picks]
    sentences.insert(int(rng.integers(0, len(sentences) + 1)), core)
    return " ".join(sentences)


def gen_corpus(
    seed: int,
    n_clips: int,
    sizes: Tuple[int, int, int] = (6, 6, 3),
    split: Optional[str] = None,
    holdout_every: int = 4,
    n_distractors: int = 2,
) -> List[SynthClip]:
    """
    Deterministic corpus. `split="train"` draws only tag combinations outside
    the holdout set, `split="eval"` only those inside it, None draws from all.
    """
    if n_clips < 1:
        raise ValueError("n_clips должно быть >= 1")
    vocab = TagVocabulary.create(*sizes)
    combos = list(product(range(sizes[0]), range(sizes[1]), range(sizes[2])))
    if split == "train":
        combos = [c for c in combos if not is_holdout_combo(*c, holdout_every)]
    elif split == "eval":
        combos = [c for c in combos if is_holdout_combo(*c, holdout_every)]
    rng = make_rng(seed, "corpus", split or "all")

    clips = []
    for n in range(n_clips):
        g, i, t = combos[int(rng.integers(0, len(combos)))]
        clip_seed = int(rng.integers(0, 2 ** 31 - 1))
        names = (vocab.genres[g], vocab.instruments[i], vocab.tempos[t])
        caption = _caption(names[0], names[1], names[2], make_rng(clip_seed, "caption"), n_distractors)
        qa = [
            (QUESTIONS["genre"][0], names[0]),
            (QUESTIONS["instrument"][0], names[1]),
            (QUESTIONS["tempo"][0], names[2]),
        ]
        clips.append(SynthClip(f"{split or 'all'}-{n:05d}", clip_seed, g, i, t, caption, qa, split or "all"))
    return clips


def render_waveform(clip: SynthClip, cfg: FrontendConfig, frames: int) -> Waveform:
    """
    Synthesise the clip: genre sets rhythm and arpeggio, instrument sets
    harmonics, tempo sets step length. The signal is noise-free, so bands no
    harmonic reaches stay near the log floor.
    """
    rng = make_rng(clip.seed, "audio")
    sr = cfg.sample_rate
    n = cfg.samples_for_frames(frames)
    t = np.arange(n) / sr
    pattern = GENRE_PATTERNS[clip.genre]
    harmonics = np.asarray(INSTRUMENT_HARMONICS[clip.instrument])
    step = TEMPO_STEP_SECONDS[clip.tempo]
    offset = rng.uniform(0.0, 0.02)
    detune = 2.0 ** (rng.uniform(-0.1, 0.1) / 12.0)

    signal = np.zeros(n)
    note = 0
    bar = 0
    while True:
        onsets = [offset + (bar * 8 + s) * step for s in pattern["steps"]]
        if onsets[0] >= t[-1]:
            break
        for onset in onsets:
            if onset >= t[-1]:
                break
            midi = pattern["base"] + pattern["intervals"][note % len(pattern["intervals"])]
            f0 = 440.0 * 2.0 ** ((midi - 69) / 12.0) * detune
            start = int(onset * sr)
            local = t[start:] - t[start]
            envelope = np.minimum(local / 0.005, 1.0) * np.exp(-local / pattern["decay"])
            tone = np.zeros_like(local)
            for h, amp in enumerate(harmonics, start=1):
                if amp > 0 and h * f0 < sr / 2:
                    tone += amp * np.sin(2 * np.pi * h * f0 * local)
            signal[start:] += envelope * tone
            note += 1
        bar += 1

    return Waveform(0.9 * signal / np.abs(signal).max(), sr)


# ---------------------------------------------------------------- QA formatting

@dataclass
class Example:
    example_id: str
    clip_id: str
    kind: str
    question: str
    answer: str

    def tokens(self) -> TokenSequence:
        """Encoded [SOS] question [SEP] answer [EOS]."""
        return encode_example(self.question, self.answer)


def format_qa(clip: SynthClip, mode: DataMode, paraphrases: bool = False) -> List[Example]:
    """
    RawCaption -> one (generic question, full caption) example; GPT-QA -> one
    example per (question, tag) pair; Both -> the two streams concatenated.
    Finetune is a schedule flag: it yields the first-phase (Both) stream.
    """
    if not clip.qa_pairs:
        raise ValueError(f"У клипа {clip.clip_id} нет пар вопрос-ответ")
    mode = DataMode(mode)
    raw = [Example(f"{clip.clip_id}:raw", clip.clip_id, "raw", RAW_QUESTION, clip.caption)]
    qa = [Example(f"{clip.clip_id}:qa{k}", clip.clip_id, "qa", q, a) for k, (q, a) in enumerate(clip.qa_pairs)]
    if paraphrases:
        for q, a in clip.qa_pairs:
            attribute = next(name for name, qs in QUESTIONS.items() if q in qs)
            for j, alt in enumerate(QUESTIONS[attribute][1:], start=1):
                qa.append(Example(f"{clip.clip_id}:qa-{attribute}{j}", clip.clip_id, "qa", alt, a))
    if mode is DataMode.RAW_CAPTION:
        return raw
    if mode is DataMode.GPT_QA:
        return qa
    return raw + qa


# ---------------------------------------------------------------- prompts

class PromptKind(str, Enum):
    PROMPT_ONLY = "PromptOnly"
    TAGS_LIST = "PromptTagsList"
    TAGS_LIST_ONE_WORD = "PromptTagsListOneWord"
    ALL_CANDIDATES = "PromptAllCandidates"


@dataclass(frozen=True)
class PromptStrategy:
    tag: PromptKind
    output: str
    postprocess: str


STRATEGIES = {
    PromptKind.PROMPT_ONLY: PromptStrategy(PromptKind.PROMPT_ONLY, "Sentence", "Similarity"),
    PromptKind.TAGS_LIST: PromptStrategy(PromptKind.TAGS_LIST, "Sentence", "Similarity"),
    PromptKind.TAGS_LIST_ONE_WORD: PromptStrategy(PromptKind.TAGS_LIST_ONE_WORD, "OneHot", "None"),
    PromptKind.ALL_CANDIDATES: PromptStrategy(PromptKind.ALL_CANDIDATES, "N/A", "LogLikelihood"),
}


def build_prompt(strategy: Union[PromptStrategy, PromptKind, str], question: str, candidates: Sequence[str], noun: str = "genres") -> List[str]:
    kind = strategy.tag if isinstance(strategy, PromptStrategy) else PromptKind(strategy)
    if kind is PromptKind.PROMPT_ONLY:
        return [question]
    if not candidates:
        raise ValueError(f"Стратегия {kind.value} требует непустой список кандидатов")
    listing = ", ".join(candidates)
    if kind is PromptKind.TAGS_LIST:
        return [f"{question} The {noun} include {listing}."]
    if kind is PromptKind.TAGS_LIST_ONE_WORD:
        return [f"{question} Answer one word from {listing}."]
    return [f"{question} {answer_sentence(candidate)}" for candidate in candidates]


def answer_sentence(candidate: str) -> str:
    """'The answer is <candidate>.', the sentence form a candidate is scored in."""
    return f"{ANSWER_LEAD}{candidate}."


def split_candidate_prompt(prompt: str) -> Tuple[str, str]:
    """'<question> The answer is <candidate>.' -> (question, 'The answer is <candidate>.')"""
    question, lead, candidate = prompt.rpartition(" " + ANSWER_LEAD)
    if not lead:
        raise ValueError(f"В строке нет '{ANSWER_LEAD.strip()}': {prompt!r}")
    return question, ANSWER_LEAD + candidate


def _words(text: str) -> List[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def token_f1(generated: str, candidate: str) -> float:
    """Word-level F1 overlap between a generated sentence and a candidate tag."""
    gen, cand = _words(generated), _words(candidate)
    common = sum((Counter(gen) & Counter(cand)).values())
    if not gen or not cand or common == 0:
        return 0.0
    precision, recall = common / len(gen), common / len(cand)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- export / import

def export_corpus(clips: Sequence[SynthClip], vocab: TagVocabulary, path: str):
    """One JSON record per line: clip_id, seed, split, tags, tag_ids, caption, qa."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for clip in clips:
            f.write(json.dumps(clip.to_record(vocab), ensure_ascii=False, sort_keys=True) + "\n")


def import_corpus(path: str) -> List[SynthClip]:
    """Reads a corpus written by export_corpus; blank lines are skipped."""
    with open(path, "r", encoding="utf-8") as f:
        return [SynthClip.from_record(json.loads(line)) for line in f if line.strip()]
