"""Training objectives: cross-modal token alignment, hidden-state distillation, KL monitor.

Shapes: audio tokens (B, |Q|, H) from the adapter, text embeddings (B, N, H) from
the frozen LM's input table, hidden states (B, H) at the first-next-token position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio import AudioEncoder
from .errors import AlignmentError, ConfigError, DataError, DimensionError
from .numcore import Tensor, as_tensor, no_grad, ops
from .qformer import QFormerAdapter
from .toylm import (ASSISTANT, BOS, EOS, PROMPT_PREFIX, PROMPT_SUFFIX, USER, ToyLM, embed_text,
                    forward_mixed, forward_text)

__all__ = ["LossBreakdown", "StudentPipeline", "alignment_per_example", "token_alignment_loss",
           "distill_loss", "reference_kl", "teacher_hidden", "text_embeddings", "combined_step_loss",
           "teacher_prompt"]


@dataclass(frozen=True)
class LossBreakdown:
    l_con: float
    l_distill: float
    combined: float
    reference_kl: float
    lambda_con: float

    def row(self) -> tuple[float, float, float, float]:
        return (self.l_con, self.l_distill, self.combined, self.reference_kl)


# -- token alignment -----------------------------------------------------------------

def _alignment_index(n_queries: int, lengths: np.ndarray, truncate: bool) -> tuple[np.ndarray, np.ndarray]:
    """Audio row for each (example, text position): the final N rows, in order."""
    if np.any(lengths < 1):
        raise AlignmentError("transcripts must contain at least one token")
    too_long = lengths >= n_queries
    if np.any(too_long):
        if not truncate:
            n = int(lengths[too_long][0])
            raise AlignmentError(f"transcript of {n} tokens needs more than {n_queries} audio tokens")
        lengths = np.minimum(lengths, n_queries - 1)
    width = int(lengths.max())
    pos = np.arange(width)[None, :]
    mask = pos < lengths[:, None]
    rows = np.where(mask, n_queries - lengths[:, None] + pos, 0)
    return rows, mask


def alignment_per_example(t_audio: Tensor, t_text: Tensor, lengths=None, squared: bool = False,
                          truncate: bool = False) -> Tensor:
    """Per-example sum over n < N of ||t_text[n] - t_audio[|Q|-N+n]|| for batched inputs.

    t_audio (B, |Q|, H); t_text (B, Nmax, H) with per-example ``lengths`` (default Nmax).
    ``truncate`` keeps only the first |Q|-1 text tokens when a transcript is too long.
    """
    t_audio, t_text = as_tensor(t_audio), as_tensor(t_text)
    if t_audio.ndim != 3 or t_text.ndim != 3 or t_audio.shape[0] != t_text.shape[0]:
        raise DimensionError(f"alignment expects (B,|Q|,H) and (B,N,H), got {t_audio.shape} and {t_text.shape}")
    if t_audio.shape[-1] != t_text.shape[-1]:
        raise DimensionError(f"alignment width mismatch: {t_audio.shape[-1]} vs {t_text.shape[-1]}")
    b, q, _ = t_audio.shape
    lens = np.full(b, t_text.shape[1]) if lengths is None else np.asarray(lengths, dtype=np.int64)
    rows, mask = _alignment_index(q, lens, truncate)
    text = t_text[:, : rows.shape[1]]
    aligned = t_audio[np.arange(b)[:, None], rows]
    diff = text - aligned
    if squared:
        per_pos = ops.sum(diff * diff, axis=-1)
    else:
        per_pos = ops.l2_norm(diff, axis=-1)
    return ops.sum(per_pos * mask.astype(per_pos.dtype), axis=-1)


def token_alignment_loss(t_audio: Tensor, t_text: Tensor, squared: bool = False,
                         truncate: bool = False) -> Tensor:
    """Sum_{n=0}^{N-1} ||t_text[n] - t_audio[|Q|-N+n]||_2 for a single example (|Q|, H), (N, H)."""
    t_audio, t_text = as_tensor(t_audio), as_tensor(t_text)
    if t_audio.ndim != 2 or t_text.ndim != 2:
        raise DimensionError(f"expected (|Q|,H) and (N,H), got {t_audio.shape} and {t_text.shape}")
    out = alignment_per_example(ops.reshape(t_audio, (1,) + t_audio.shape),
                                 ops.reshape(t_text, (1,) + t_text.shape), squared=squared,
                                 truncate=truncate)
    return ops.reshape(out, ())


# -- distillation and monitor ----------------------------------------------------------

def distill_loss(h_s: Tensor, h_t) -> Tensor:
    """||h_s - h_t||_2 over the last axis; the teacher side is treated as a constant."""
    h_s = as_tensor(h_s)
    target = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    if h_s.shape[-1] != target.shape[-1]:
        raise DimensionError(f"distill_loss width mismatch: {h_s.shape} vs {target.shape}")
    return ops.l2_norm(h_s - Tensor(target.astype(h_s.dtype, copy=False)), axis=-1)


def reference_kl(h_t, h_s, out_emb) -> np.ndarray:
    """KL(softmax(O h_t) || softmax(O h_s)) with clamped logs; never on the gradient path."""
    ht = np.asarray(h_t.data if isinstance(h_t, Tensor) else h_t)
    hs = np.asarray(h_s.data if isinstance(h_s, Tensor) else h_s)
    o = np.asarray(out_emb.data if isinstance(out_emb, Tensor) else out_emb)
    if ht.shape != hs.shape or ht.shape[-1] != o.shape[-1]:
        raise DimensionError(f"reference_kl shapes: h_t {ht.shape}, h_s {hs.shape}, O {o.shape}")
    with no_grad():
        p = ops.softmax(Tensor(ht @ o.T))
        q = ops.softmax(Tensor(hs @ o.T))
        return ops.kl_divergence(p, q).data


# -- teacher and student paths ----------------------------------------------------------

def teacher_prompt(transcript: Sequence[int]) -> list[int]:
    return [*PROMPT_PREFIX, *transcript, *PROMPT_SUFFIX]


def teacher_hidden(lm: ToyLM, transcripts: Sequence[Sequence[int]], batch: int = 256) -> np.ndarray:
    """Teacher hidden state at the first-next-token position of the text prompt, (B, H)."""
    if len(transcripts) == 0:
        raise DataError("no transcripts")
    out = []
    with no_grad():
        for i in range(0, len(transcripts), batch):
            prompts = [teacher_prompt(t) for t in transcripts[i:i + batch]]
            length = max(len(p) for p in prompts)
            toks = np.full((len(prompts), length), EOS, dtype=np.int64)
            for j, p in enumerate(prompts):
                toks[j, : len(p)] = p
            h = forward_text(lm, toks).data
            last = np.array([len(p) - 1 for p in prompts])
            out.append(h[np.arange(len(prompts)), last])
    return np.concatenate(out)


def text_embeddings(lm: ToyLM, transcripts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Padded rows of the frozen input table (B, Nmax, H) and transcript lengths."""
    lens = np.array([len(t) for t in transcripts], dtype=np.int64)
    toks = np.full((len(transcripts), int(lens.max())), EOS, dtype=np.int64)
    for i, t in enumerate(transcripts):
        toks[i, : len(t)] = t
    with no_grad():
        return embed_text(lm, toks).data, lens


class StudentPipeline:
    """Audio features -> encoder -> adapter -> injected between the prompt prefix and suffix."""

    def __init__(self, encoder: AudioEncoder, adapter: QFormerAdapter, lm: ToyLM,
                 freeze_encoder: bool = False):
        if adapter.out_width != lm.width:
            raise DimensionError(f"adapter projects to {adapter.out_width}, LM width is {lm.width}")
        self.encoder = encoder
        self.adapter = adapter
        self.lm = lm
        self.freeze_encoder = freeze_encoder
        encoder.set_requires_grad(not freeze_encoder)
        adapter.set_requires_grad(True)

    def trainable(self) -> dict[str, Tensor]:
        params = {f"adapter.{k}": p for k, p in self.adapter.named_parameters()}
        if not self.freeze_encoder:
            params.update({f"encoder.{k}": p for k, p in self.encoder.named_parameters()})
        return params

    def audio_tokens(self, feats) -> Tensor:
        return self.adapter(self.encoder(as_tensor(feats)))

    def hidden(self, tokens: Tensor) -> Tensor:
        """h_s: LM hidden state at the position right after the prompt, (B, H)."""
        h = forward_mixed(self.lm, PROMPT_PREFIX, tokens, PROMPT_SUFFIX)
        return h[..., -1, :]

    def hidden_from_features(self, feats) -> Tensor:
        return self.hidden(self.audio_tokens(feats))


def combined_step_loss(feats, transcripts: Sequence[Sequence[int]], student: StudentPipeline,
                       lm: ToyLM, lambda_con: float = 1.0, arm: str = "full",
                       h_t: np.ndarray | None = None, squared: bool = False,
                       truncate: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Batch objective for one step and its logged breakdown.

    ``combined`` always reports l_distill + lambda_con * l_con. The arm picks which terms carry
    gradient: full uses that sum, distill_only uses l_distill, align_only uses l_con.
    """
    if h_t is None:
        h_t = teacher_hidden(lm, transcripts)
    t_text, lens = text_embeddings(lm, transcripts)
    tokens = student.audio_tokens(feats)
    h_s = student.hidden(tokens)
    con = ops.mean(alignment_per_example(tokens, Tensor(t_text), lens, squared, truncate))
    dist = ops.mean(distill_loss(h_s, h_t))
    if arm == "full":
        objective = dist + con * lambda_con if lambda_con else dist
    elif arm == "distill_only":
        objective = dist
    elif arm == "align_only":
        objective = con
    else:
        raise ConfigError(f"unknown arm {arm!r}")
    l_con, l_dist = float(con.data), float(dist.data)
    kl = float(np.mean(reference_kl(h_t, h_s, lm.out_emb)))
    return objective, LossBreakdown(l_con, l_dist, l_dist + lambda_con * l_con, kl, lambda_con)
