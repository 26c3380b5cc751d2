"""Student-vs-teacher evaluation: first-token agreement, label scoring, paired bootstrap."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SpeechSet
from .distill import StudentPipeline, teacher_hidden
from .errors import DataError, UsageError
from .numcore import Rng, Tensor, no_grad
from .toylm import (NO, PROMPT_PREFIX, PROMPT_SUFFIX, TASK_BIN, TASK_TRI, TRI_LABELS, YES, SyntheticLanguage, ToyLM,
                    embed_text, forward_mixed, mixed_embeds, score_labels)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    teacher_argmax: int
    student_argmax: int
    value: float
    scores: tuple[float, ...] | None = None
    gold: int | None = None


@dataclass(frozen=True)
class BootstrapReport:
    diff: float
    p_value: float
    ci_low: float
    ci_high: float
    resamples: int
    seed: int


class TextPathStudent:
    """Feeds the transcript's own input embeddings where the audio tokens would go."""

    def __init__(self, lm: ToyLM):
        self.lm = lm

    def injected(self, data: SpeechSet, i: int) -> Tensor:
        return embed_text(self.lm, data.transcripts[i])

    def first_token_hidden(self, data: SpeechSet, batch: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(len(data)):
                h = forward_mixed(self.lm, PROMPT_PREFIX, self.injected(data, i), PROMPT_SUFFIX)
                out.append(h.data[-1])
        return np.stack(out)


def _student_hidden(student, data: SpeechSet, batch: int = 64) -> np.ndarray:
    if isinstance(student, StudentPipeline):
        out = []
        with no_grad():
            for i in range(0, len(data), batch):
                out.append(student.hidden_from_features(data.feats[i:i + batch]).data)
        return np.concatenate(out)
    return student.first_token_hidden(data, batch)


def _injected(student, data: SpeechSet, i: int) -> Tensor:
    if isinstance(student, StudentPipeline):
        return student.audio_tokens(data.feats[i:i + 1])[0]
    return student.injected(data, i)


def argmax_tokens(h: np.ndarray, out_emb: np.ndarray) -> np.ndarray:
    """First-next-token argmax; np.argmax breaks ties at the lowest index."""
    return np.argmax(h @ out_emb.T, axis=-1)


def first_token_agreement(student, lm: ToyLM, data: SpeechSet,
                          teacher_h: np.ndarray | None = None) -> tuple[float, list[EvalRecord]]:
    """Fraction of examples whose student (audio path) argmax equals the teacher's (text path)."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    o = lm.out_emb.data
    t_h = teacher_hidden(lm, data.transcripts) if teacher_h is None else teacher_h
    t_arg = argmax_tokens(t_h, o)
    s_arg = argmax_tokens(_student_hidden(student, data), o)
    records = [EvalRecord(data.ids[i], int(t_arg[i]), int(s_arg[i]), float(t_arg[i] == s_arg[i]))
               for i in range(len(data))]
    return float(np.mean(t_arg == s_arg)), records


TASKS = {"binary": (TASK_BIN, (YES, NO)), "tri": (TASK_TRI, TRI_LABELS)}


def gold_labels(language: SyntheticLanguage, transcripts: Sequence[Sequence[int]], task: str) -> list[int]:
    rule = language.binary_label if task == "binary" else language.tri_label
    return [rule(t) for t in transcripts]


def classify(student, lm: ToyLM, data: SpeechSet, task: str) -> list[tuple[int, tuple[float, ...]]]:
    """Label log-prob argmax with the task marker appended after the injected tokens.

    ``student`` may be None to classify through the teacher's own text path.
    """
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    marker, labels = TASKS[task]
    out = []
    with no_grad():
        for i in range(len(data)):
            inj = embed_text(lm, data.transcripts[i]) if student is None else _injected(student, data, i)
            ctx = mixed_embeds(lm, PROMPT_PREFIX, inj, [marker])
            scores = score_labels(lm, ctx, [[lab] for lab in labels])
            out.append((int(labels[int(np.argmax(scores))]), tuple(float(s) for s in scores)))
    return out


def classification_report(student, lm: ToyLM, language: SyntheticLanguage, data: SpeechSet,
                          task: str) -> tuple[dict, list[EvalRecord]]:
    golds = gold_labels(language, data.transcripts, task)
    stu = classify(student, lm, data, task)
    tea = classify(None, lm, data, task)
    preds = [p for p, _ in stu]
    labels = list(TASKS[task][1])
    records = [EvalRecord(data.ids[i], tea[i][0], preds[i], float(preds[i] == golds[i]), stu[i][1], golds[i])
               for i in range(len(data))]
    summary = {"task": task, "accuracy": accuracy(preds, golds),
               "weighted_f1": weighted_f1(preds, golds, labels),
               "teacher_accuracy": accuracy([p for p, _ in tea], golds),
               "teacher_weighted_f1": weighted_f1([p for p, _ in tea], golds, labels)}
    return summary, records


# -- metrics ------------------------------------------------------------------------

def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds):
        raise UsageError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")
    if len(preds) == 0:
        raise DataError("accuracy of an empty set")
    return float(np.mean(np.asarray(preds) == np.asarray(golds)))


def weighted_f1(preds: Sequence[int], golds: Sequence[int], labels: Sequence[int]) -> float:
    """Per-class F1 (0 when undefined), weighted by gold support."""
    if len(preds) != len(golds):
        raise UsageError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")
    if len(golds) == 0:
        raise DataError("F1 of an empty set")
    labels = list(labels)
    known = set(labels)
    for v in (*preds, *golds):
        if v not in known:
            raise DataError(f"label {v!r} outside label set {labels}")
    p, g = np.asarray(preds), np.asarray(golds)
    total = 0.0
    for lab in labels:
        tp = float(np.sum((p == lab) & (g == lab)))
        n_pred, n_gold = float(np.sum(p == lab)), float(np.sum(g == lab))
        if n_gold == 0:
            continue
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_gold
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        total += f1 * n_gold
    return total / len(g)


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float], resamples: int = 10000,
                     seed: int = 0) -> BootstrapReport:
    """Two-sided paired bootstrap on the mean difference a - b.

    Pairs are put in a canonical order before resampling, so the report does not depend on
    the order the examples were listed in.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"paired scores must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise UsageError("paired bootstrap needs at least 2 pairs")
    if resamples < 100:
        raise UsageError("paired bootstrap needs at least 100 resamples")
    order = np.lexsort((b, a))
    diff = (a - b)[order]
    gen = Rng(seed).spawn("bootstrap").generator
    stats = np.empty(resamples)
    chunk = max(1, 4_000_000 // n)
    for lo in range(0, resamples, chunk):
        hi = min(resamples, lo + chunk)
        idx = gen.integers(0, n, size=(hi - lo, n))
        stats[lo:hi] = diff[idx].mean(axis=1)
    below = float(np.mean(stats <= 0))
    above = float(np.mean(stats >= 0))
    p = min(1.0, 2.0 * min(below, above))
    lo_ci, hi_ci = np.percentile(stats, [2.5, 97.5])
    return BootstrapReport(float(diff.mean()), p, float(lo_ci), float(hi_ci), resamples, seed)


def chance_indicators(teacher_argmax: Sequence[int], vocab: int, seed: int) -> np.ndarray:
    """Per-example hits of a uniform random guesser over the vocabulary."""
    guess = Rng(seed).spawn("chance").integers(0, vocab, shape=len(teacher_argmax))
    return (guess == np.asarray(teacher_argmax)).astype(np.float64)


# -- report files -------------------------------------------------------------------

RECORD_HEADER = ("id", "teacher_argmax", "student_argmax", "gold", "value", "scores")
BOOTSTRAP_HEADER = ("name_a", "name_b", "diff", "p_value", "ci_low", "ci_high", "resamples", "seed")


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        scores = "" if r.scores is None else " ".join(repr(s) for s in r.scores)
        w.writerow([r.id, r.teacher_argmax, r.student_argmax, "" if r.gold is None else r.gold,
                    repr(r.value), scores])
    return buf.getvalue()


def bootstrap_csv(rows: Sequence[tuple[str, str, BootstrapReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOOTSTRAP_HEADER)
    for name_a, name_b, rep in rows:
        w.writerow([name_a, name_b, repr(rep.diff), repr(rep.p_value), repr(rep.ci_low),
                    repr(rep.ci_high), rep.resamples, rep.seed])
    return buf.getvalue()
