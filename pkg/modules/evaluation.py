"""
Zero-shot evaluation: candidate ranking by log-likelihood, generative prompting
with similarity post-processing, and accuracy / AP / ROC-AUC reports.
"""

import html
import json
import os
from dataclasses import asdict, dataclass, field
from queue import Queue
from threading import Thread
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from sklearn.metrics import accuracy_score, average_precision_score, roc_auc_score

from modules.mae import EncoderStack
from modules.resampler import LatentSummary
from modules.synth import (
    ANSWER_LEAD,
    NOUNS,
    QUESTIONS,
    PromptKind,
    Role,
    SynthClip,
    TagVocabulary,
    build_prompt,
    detokenize,
    encode_example,
    encode_prompt,
    split_candidate_prompt,
    token_f1,
)
from modules.tensor import no_grad

GENERATION_CAP = 32

Audio = Union[EncoderStack, Mapping[str, LatentSummary]]


@dataclass
class CandidateScore:
    candidate: str
    log_likelihood: float
    tokens: int
    normalized: bool = True

    @property
    def value(self) -> float:
        return self.log_likelihood / self.tokens if self.normalized else self.log_likelihood


def _summaries(audio: Audio, model) -> Mapping[str, LatentSummary]:
    return model.summarize(audio) if isinstance(audio, EncoderStack) else audio


def score_candidate(audio: Audio, question: str, candidate: str, model, normalize: bool = True) -> CandidateScore:
    """
    Sum of log p(candidate byte | audio, question, earlier bytes) inside the
    sentence '<question> The answer is <candidate>.'. The lead words are
    context; the final period and EOS are not scored.
    """
    if not candidate:
        raise ValueError("Пустой кандидат")
    prompt = build_prompt(PromptKind.ALL_CANDIDATES, question, [candidate])[0]
    question, sentence = split_candidate_prompt(prompt)
    tokens = encode_example(question, sentence)
    lead = len(ANSWER_LEAD.encode("utf-8"))
    n = len(candidate.encode("utf-8", errors="surrogateescape"))
    positions = np.nonzero(tokens.roles == Role.ANSWER)[0][lead : lead + n]
    with no_grad():
        logits = model.decoder_forward(tokens, _summaries(audio, model)).data
    logp = logits[positions - 1] - logsumexp(logits[positions - 1], axis=1, keepdims=True)
    total = float(logp[np.arange(n), tokens.ids[positions]].sum())
    return CandidateScore(candidate, total, n, normalize)


def pick_best(scores: Sequence[CandidateScore]) -> str:
    """Highest score wins; equal scores fall back to lexicographic order."""
    best = max(s.value for s in scores)
    return min(s.candidate for s in scores if s.value == best)


def rank_and_predict(
    audio: Audio, question: str, candidates: Sequence[str], model, normalize: bool = True
) -> Tuple[str, List[CandidateScore]]:
    if len(candidates) < 2:
        raise ValueError("Для ранжирования нужно не меньше двух кандидатов")
    summaries = _summaries(audio, model)
    scores = [score_candidate(summaries, question, c, model, normalize) for c in candidates]
    return pick_best(scores), scores


def greedy_decode(audio: Audio, prompt: str, model, cap: int = GENERATION_CAP) -> str:
    """Argmax decoding after '[SOS] prompt [SEP]' until EOS, a special id or `cap` bytes."""
    summaries = _summaries(audio, model)
    ids = list(encode_prompt(prompt))
    max_len = model.decoder.config.max_len
    generated: List[int] = []
    with no_grad():
        while len(generated) < cap and len(ids) < max_len:
            logits = model.decoder_forward(np.array(ids), summaries).data
            token = int(np.argmax(logits[-1]))
            if token >= 256:
                break
            generated.append(token)
            ids.append(token)
    # invalid UTF-8 becomes U+FFFD
    return detokenize(generated, as_bytes=True).decode("utf-8", errors="replace")


def most_similar(text: str, candidates: Sequence[str]) -> str:
    best = max(token_f1(text, c) for c in candidates)
    return min(c for c in candidates if token_f1(text, c) == best)


def eval_generative(
    audio: Audio,
    question: str,
    strategy: Union[PromptKind, str],
    candidates: Sequence[str],
    model,
    noun: str = "genres",
) -> Tuple[str, str]:
    """Returns (predicted candidate, generated text)."""
    kind = PromptKind(strategy)
    if kind is PromptKind.ALL_CANDIDATES:
        raise ValueError("PromptAllCandidates оценивается через rank_and_predict")
    prompt = build_prompt(kind, question, candidates, noun)[0]
    text = greedy_decode(audio, prompt, model)
    if kind is PromptKind.TAGS_LIST_ONE_WORD:
        words = text.strip().split()
        first = words[0].strip(".,!?").lower() if words else ""
        for candidate in candidates:
            if candidate.lower() == first:
                return candidate, text
    return most_similar(text, candidates), text


# ---------------------------------------------------------------- metrics

@dataclass
class EvalReport:
    task: str
    strategy: str
    topology: str = ""
    normalized: bool = True
    predictions: List[Dict] = field(default_factory=list)
    accuracy: Optional[float] = None
    per_tag_ap: Dict[str, float] = field(default_factory=dict)
    per_tag_auc: Dict[str, float] = field(default_factory=dict)
    macro_pr: Optional[float] = None
    macro_auc: Optional[float] = None
    excluded_tags: List[str] = field(default_factory=list)

    def summary(self) -> Dict:
        data = asdict(self)
        data.pop("predictions")
        data["clips"] = len(self.predictions)
        return data


def compute_accuracy(predictions: Sequence[str], truth: Sequence[str]) -> float:
    if len(predictions) != len(truth) or not truth:
        raise ValueError("Число предсказаний и ответов должно совпадать и быть > 0")
    return float(accuracy_score(list(truth), list(predictions)))


def compute_metrics(scores: np.ndarray, truth: np.ndarray, tags: Sequence[str], report: Optional[EvalReport] = None) -> EvalReport:
    """
    Per-tag average precision and ROC-AUC over an (n_clips, n_tags) score
    matrix, macro-averaged over tags that have both positives and negatives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape or scores.ndim != 2 or scores.shape[1] != len(tags):
        raise ValueError(f"Несогласованные формы: оценки {scores.shape}, разметка {truth.shape}, тегов {len(tags)}")
    report = report or EvalReport(task="tagging", strategy=PromptKind.ALL_CANDIDATES.value)
    for k, tag in enumerate(tags):
        column = truth[:, k]
        if column.all() or not column.any():
            print(f"⚠️ Тег '{tag}' без положительных или отрицательных примеров исключён из усреднения")
            report.excluded_tags.append(tag)
            continue
        report.per_tag_ap[tag] = float(average_precision_score(column, scores[:, k]))
        report.per_tag_auc[tag] = float(roc_auc_score(column, scores[:, k]))
    if report.per_tag_ap:
        report.macro_pr = float(np.mean(list(report.per_tag_ap.values())))
        report.macro_auc = float(np.mean(list(report.per_tag_auc.values())))
    return report


# ---------------------------------------------------------------- evaluator

class ZeroShotEvaluator:
    """Scores clips on worker threads; results are reduced in clip order."""

    def __init__(self, model, cache, vocab: TagVocabulary, thread_count: int = 1, normalize: bool = True):
        self.model = model
        self.cache = cache
        self.vocab = vocab
        self.thread_count = max(1, thread_count)
        self.normalize = normalize

    def handle_jobs(self, q: Queue, results: List, job):
        """Thread worker function: evaluate queued (index, clip) pairs until a None sentinel."""
        while True:
            item = q.get()
            if item is None:
                q.task_done()
                break
            index, clip = item
            try:
                with no_grad():
                    results[index] = job(clip)
            except Exception as e:
                results[index] = e
            finally:
                q.task_done()

    def _map(self, clips: Sequence[SynthClip], job) -> List:
        results: List = [None] * len(clips)
        if self.thread_count == 1:
            for i, clip in enumerate(clips):
                with no_grad():
                    results[i] = job(clip)
            return results
        queue = Queue()
        workers = []
        for _ in range(self.thread_count):
            t = Thread(target=self.handle_jobs, args=(queue, results, job))
            t.daemon = True
            t.start()
            workers.append(t)
        for item in enumerate(clips):
            queue.put(item)
        queue.join()
        # one sentinel per worker
        for _ in workers:
            queue.put(None)
        for t in workers:
            t.join()
        for result in results:
            if isinstance(result, Exception):
                raise result
        return results

    def classify(
        self,
        clips: Sequence[SynthClip],
        attribute: str,
        strategy: Union[PromptKind, str] = PromptKind.ALL_CANDIDATES,
        unseen: bool = True,
    ) -> EvalReport:
        """Single-label task over one tag attribute (genre, instrument or tempo)."""
        kind = PromptKind(strategy)
        candidates = self.vocab.names(attribute, unseen)
        question = QUESTIONS[attribute][0]
        self.cache.warm(clips)

        def job(clip: SynthClip) -> Dict:
            audio = self.model.summarize(self.cache.get(clip))
            record = {"clip_id": clip.clip_id, "truth": candidates[clip.tag_ids()[attribute]]}
            if kind is PromptKind.ALL_CANDIDATES:
                prediction, scores = rank_and_predict(audio, question, candidates, self.model, self.normalize)
                record["scores"] = {s.candidate: s.value for s in scores}
            else:
                prediction, text = eval_generative(audio, question, kind, candidates, self.model, NOUNS[attribute])
                record["generated"] = text
            record["prediction"] = prediction
            return record

        records = self._map(clips, job)
        report = EvalReport(
            task=attribute,
            strategy=kind.value,
            topology=self.model.topology.describe(),
            normalized=self.normalize,
            predictions=records,
        )
        report.accuracy = compute_accuracy([r["prediction"] for r in records], [r["truth"] for r in records])
        return report

    def tag(self, clips: Sequence[SynthClip], unseen: bool = True) -> EvalReport:
        """
        Multi-label tagging over all genre and instrument tags. Each tag gets
        score("<tag>") - score("not <tag>") under its attribute question.
        """
        attributes = ["genre", "instrument"]
        tags = [(a, name) for a in attributes for name in self.vocab.names(a, unseen)]
        self.cache.warm(clips)

        def job(clip: SynthClip) -> Dict:
            audio = self.model.summarize(self.cache.get(clip))
            row = {}
            for attribute, name in tags:
                question = QUESTIONS[attribute][0]
                yes = score_candidate(audio, question, name, self.model, self.normalize)
                no = score_candidate(audio, question, f"not {name}", self.model, self.normalize)
                row[name] = yes.value - no.value
            truth = [self.vocab.names(a, unseen)[clip.tag_ids()[a]] for a in attributes]
            return {"clip_id": clip.clip_id, "truth": truth, "scores": row}

        records = self._map(clips, job)
        names = [name for _, name in tags]
        scores = np.array([[r["scores"][n] for n in names] for r in records])
        truth = np.array([[n in r["truth"] for n in names] for r in records])
        report = EvalReport(
            task="tagging",
            strategy=PromptKind.ALL_CANDIDATES.value,
            topology=self.model.topology.describe(),
            normalized=self.normalize,
            predictions=records,
        )
        return compute_metrics(scores, truth, names, report)


# ---------------------------------------------------------------- export

def save_report_jsonl(report: EvalReport, path: str):
    """First line is the summary record, then one record per clip."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"type": "summary", **report.summary()}, ensure_ascii=False, sort_keys=True) + "\n")
        for record in report.predictions:
            f.write(json.dumps({"type": "clip", **record}, ensure_ascii=False, sort_keys=True) + "\n")


def load_report_jsonl(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("type") != "summary":
        raise ValueError(f"Файл {path} не начинается с итоговой записи")
    summary = {k: v for k, v in lines[0].items() if k not in ("type", "clips")}
    report = EvalReport(**summary)
    report.predictions = [{k: v for k, v in line.items() if k != "type"} for line in lines[1:]]
    return report


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def save_report_html(reports: Sequence[EvalReport], file_path: str):
    """Save evaluation reports as a standalone HTML page."""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    summary_rows = "".join(
        f"<tr><td>{html.escape(r.task)}</td><td>{html.escape(r.strategy)}</td>"
        f"<td>{len(r.predictions)}</td><td>{_fmt(r.accuracy)}</td>"
        f"<td>{_fmt(r.macro_pr)}</td><td>{_fmt(r.macro_auc)}</td></tr>"
        for r in reports
    )
    sections = ""
    for r in reports:
        rows = ""
        for record in r.predictions:
            truth = record["truth"] if isinstance(record["truth"], str) else ", ".join(record["truth"])
            prediction = record.get("prediction", "")
            css = "hit" if prediction and prediction == record["truth"] else ""
            rows += (
                f"<tr class=\"{css}\"><td>{html.escape(record['clip_id'])}</td>"
                f"<td>{html.escape(truth)}</td><td>{html.escape(str(prediction))}</td>"
                f"<td>{html.escape(record.get('generated', ''))}</td></tr>"
            )
        tags = "".join(
            f"<tr><td>{html.escape(tag)}</td><td>{ap:.4f}</td><td>{r.per_tag_auc[tag]:.4f}</td></tr>"
            for tag, ap in r.per_tag_ap.items()
        )
        sections += f"""
        <div class="report">
            <h2>{html.escape(r.task)} · {html.escape(r.strategy)}</h2>
            {"<table><tr><th>Тег</th><th>AP</th><th>AUC</th></tr>" + tags + "</table>" if tags else ""}
            <table><tr><th>Клип</th><th>Истина</th><th>Предсказание</th><th>Сгенерировано</th></tr>{rows}</table>
        </div>"""

    topology = html.escape(reports[0].topology) if reports else ""
    html_content = f"""<!DOCTYPE html>
<html lang="ru">
<head>
    <meta charset="UTF-8">
    <title>Отчёт zero-shot оценки</title>
    <style>
        body {{ font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif; margin: 0; padding: 20px; background-color: #f7f8fa; }}
        .container {{ max-width: 960px; margin: 0 auto; }}
        .header {{ background: linear-gradient(135deg, #4a76a8, #5a8bb8); color: white; padding: 24px; border-radius: 12px; margin-bottom: 24px; }}
        .report {{ background: white; margin: 20px 0; padding: 20px; border-radius: 12px; border: 1px solid #e1e5eb; }}
        table {{ border-collapse: collapse; width: 100%; margin: 10px 0; }}
        th, td {{ border-bottom: 1px solid #f0f2f5; padding: 6px 10px; text-align: left; font-size: 14px; }}
        tr.hit td {{ background: #eef7ee; }}
    </style>
</head>
<body>
<div class="container">
    <div class="header">
        <h1>Отчёт zero-shot оценки</h1>
        <p>Топология: {topology}</p>
    </div>
    <div class="report">
        <table><tr><th>Задача</th><th>Стратегия</th><th>Клипов</th><th>Acc</th><th>PR</th><th>AUC</th></tr>{summary_rows}</table>
    </div>{sections}
</div>
</body>
</html>"""
    with open(file_path, "w", encoding="utf-8") as f:
        f.write(html_content)


def print_summary(reports: Sequence[EvalReport]):
    print("=== Результаты оценки ===")
    print(f"{'Задача':<12} {'Стратегия':<24} {'Acc':>8} {'PR':>8} {'AUC':>8}")
    for r in reports:
        print(f"{r.task:<12} {r.strategy:<24} {_fmt(r.accuracy):>8} {_fmt(r.macro_pr):>8} {_fmt(r.macro_auc):>8}")
        if r.excluded_tags:
            print(f"⚠️ Исключены теги: {', '.join(r.excluded_tags)}")
    print("=========================\n")


@dataclass
class EvalConfig:
    tasks: str = "genre,instrument,tagging"
    strategies: str = "PromptAllCandidates,PromptOnly,PromptTagsList,PromptTagsListOneWord"
    normalize: bool = True
    unseen: bool = True

    @property
    def task_list(self) -> List[str]:
        return [t.strip() for t in self.tasks.split(",") if t.strip()]

    @property
    def strategy_list(self) -> List[PromptKind]:
        return [PromptKind(s.strip()) for s in self.strategies.split(",") if s.strip()]

    def validate(self):
        for task in self.task_list:
            if task not in ("genre", "instrument", "tempo", "tagging"):
                raise ValueError(f"Неизвестная задача оценки: {task}")
        if not self.task_list:
            raise ValueError("Не задано ни одной задачи оценки")
        try:
            self.strategy_list
        except ValueError as e:
            raise ValueError(f"Неизвестная стратегия подсказки: {e}") from None
