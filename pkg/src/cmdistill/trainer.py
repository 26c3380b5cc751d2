"""Three-arm distillation training loop, metrics CSV, and checkpoint re-exports."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import AudioEncoder
from .checkpoint import load_checkpoint, prefixed, save_checkpoint
from .config import FULL_SCALE_REFERENCE, TrainConfig
from .data import SpeechSet
from .distill import LossBreakdown, StudentPipeline, combined_step_loss, teacher_hidden
from .errors import DataError, NumericDomainError, TrainingError
from .numcore import Rng
from .optim import AdamW, clip_grad_norm, lr_at
from .qformer import DonorDecoder, init_from_decoder
from .toylm import ToyLM

__all__ = ["TrainConfig", "TrainResult", "train", "lr_at", "AdamW", "save_checkpoint",
           "load_checkpoint", "metrics_csv", "write_metrics", "METRICS_HEADER",
           "FULL_SCALE_REFERENCE", "student_state"]

METRICS_HEADER = ("step", "lr", "l_con", "l_distill", "combined", "reference_kl")


@dataclass
class TrainResult:
    student: StudentPipeline
    rows: list[tuple] = field(default_factory=list)
    teacher_checksum: str = ""

    def series(self, column: str) -> np.ndarray:
        i = METRICS_HEADER.index(column)
        return np.array([r[i] for r in self.rows], dtype=np.float64)


def train(cfg: TrainConfig, data: SpeechSet, lm: ToyLM, encoder: AudioEncoder, donor: DonorDecoder,
          n_queries: int, log: Callable[[int, LossBreakdown], None] | None = None,
          checkpoint_path: str | Path | None = None) -> TrainResult:
    """Distil the frozen ``lm`` into an audio student built from the pretrained encoder and donor.

    The encoder is copied (the caller's instance is left untouched); the adapter is initialised
    from ``donor`` or from scratch according to ``cfg.init_mode``. Row ``s`` of the metrics holds
    the loss of the batch consumed by update ``s + 1`` and the learning rate used for it.
    """
    cfg.validate()
    if len(data) == 0:
        raise DataError("training set is empty")
    if not lm.frozen:
        raise TrainingError("teacher LM must be frozen before distillation")
    before = lm.checksum()
    rng = Rng(cfg.seed)
    adapter = init_from_decoder(donor, n_queries, lm.width, rng.spawn("adapter"),
                                scratch=cfg.init_mode == "scratch")
    student = StudentPipeline(copy.deepcopy(encoder), adapter, lm, freeze_encoder=cfg.freeze_encoder)
    params = student.trainable()
    opt = AdamW(params, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    h_all = teacher_hidden(lm, data.transcripts)

    n = len(data)
    bs = min(cfg.batch_size, n)
    order = rng.spawn("epochs")
    epoch, pos = 0, 0
    perm = order.spawn(epoch).permutation(n)
    rows: list[tuple] = []
    for step in range(cfg.total_steps):
        if pos + bs > n:
            epoch += 1
            perm, pos = order.spawn(epoch).permutation(n), 0
        idx = perm[pos:pos + bs]
        pos += bs
        for p in params.values():
            p.grad = None
        try:
            objective, parts = combined_step_loss(
                data.feats[idx], [data.transcripts[i] for i in idx], student, lm, cfg.lambda_con,
                cfg.arm, h_t=h_all[idx], squared=cfg.squared_alignment, truncate=cfg.truncate_long)
            if not np.isfinite(objective.data) or not all(np.isfinite(parts.row())):
                raise TrainingError(f"non-finite loss at step {step}")
            objective.backward()
        except NumericDomainError as exc:
            raise TrainingError(f"non-finite values at step {step}: {exc}") from exc
        clip_grad_norm(params, cfg.clip_norm if cfg.clip_norm > 0 else None)
        lr = lr_at(step + 1, cfg.total_steps, cfg.base_lr, cfg.warmup_fraction)
        opt.step(lr)
        rows.append((step, lr, *parts.row()))
        if log is not None:
            log(step, parts)
    student.adapter.set_requires_grad(False)
    student.encoder.set_requires_grad(False)
    after = lm.checksum()
    if after != before:
        raise TrainingError("teacher parameters changed during training")
    result = TrainResult(student, rows, after)
    if checkpoint_path is not None:
        save_checkpoint(student_state(student), checkpoint_path)
    return result


def student_state(student: StudentPipeline) -> dict[str, np.ndarray]:
    return {**prefixed("encoder", student.encoder.state_dict()),
            **prefixed("adapter", student.adapter.state_dict())}


def metrics_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for step, *vals in rows:
        w.writerow([int(step), *(repr(float(v)) for v in vals)])
    return buf.getvalue()


def write_metrics(rows: Sequence[tuple], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(rows))
