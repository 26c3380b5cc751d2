"""Donor ASR decoder and the Q-Former adapter initialised from it.

The donor is a toy encoder-decoder transcriber trained in-repo. The adapter
keeps every decoder layer (causal self-attention, cross-attention, FFN,
norms) but swaps the token-embedding input for learned static queries and
adds a projection from the audio width h to the LM width H.
"""

from __future__ import annotations

import copy
import math
from typing import Sequence

import numpy as np

from .audio import AudioEncoder
from .config import DonorConfig, ModelConfig
from .errors import ConfigError, DataError, DimensionError, TrainingError
from .nn import LayerNorm, Linear, Module, Parameter, TransformerLayer
from .numcore import Rng, Tensor, no_grad, ops
from .toylm import BOS, EOS


class DonorDecoder(Module):
    def __init__(self, vocab: int, width: int, n_layers: int, heads: int, max_len: int, rng: Rng,
                 dtype=np.float32):
        self.tok_emb = Parameter(rng.spawn("emb").normal((vocab, width), std=0.1).astype(dtype))
        self.pos_emb = Parameter(rng.spawn("pos").normal((max_len, width), std=0.02).astype(dtype))
        self.layers = make_decoder_layers(width, heads, n_layers, rng, dtype)
        self.ln_f = LayerNorm(width, dtype=dtype)
        self.head = Linear(width, vocab, rng.spawn("head"), dtype=dtype)
        self.vocab = vocab
        self.width = width
        self.max_len = max_len

    def __call__(self, tokens, audio: Tensor) -> Tensor:
        """Teacher-forced logits (..., L, V) for decoder input ``tokens``."""
        idx = np.asarray(tokens, dtype=np.int64)
        if idx.shape[-1] > self.max_len:
            raise DimensionError(f"decoder input of {idx.shape[-1]} exceeds {self.max_len}")
        x = ops.embedding(self.tok_emb, idx) + self.pos_emb[: idx.shape[-1]]
        for layer in self.layers:
            x = layer(x, audio)
        return self.head(self.ln_f(x))


def make_decoder_layers(width: int, heads: int, n_layers: int, rng: Rng, dtype=np.float32):
    return [TransformerLayer(width, heads, rng.spawn(("dec", i)), causal=True, cross=True,
                             n_layers=n_layers, dtype=dtype) for i in range(n_layers)]


class QFormerAdapter(Module):
    def __init__(self, queries: np.ndarray, layers: list[TransformerLayer], ln_f: LayerNorm,
                 proj: Linear):
        self.queries = Parameter(queries)
        self.layers = layers
        self.ln_f = ln_f
        self.proj = proj

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def width(self) -> int:
        return self.queries.shape[1]

    @property
    def out_width(self) -> int:
        return self.proj.weight.shape[1]

    def __call__(self, audio: Tensor) -> Tensor:
        return qformer_forward(self, audio)


def qformer_forward(adapter: QFormerAdapter, audio: Tensor) -> Tensor:
    """Static queries -> (causal self-attn, cross-attn to ``audio``, FFN) x layers -> norm -> P.

    audio: (..., T', h) -> audio tokens (..., |Q|, H).
    """
    if audio.shape[-1] != adapter.width:
        raise DimensionError(f"adapter width {adapter.width} vs audio embeddings {audio.shape}")
    x: Tensor = adapter.queries
    lead = audio.shape[:-2]
    if lead:
        x = ops.broadcast_to(x, lead + x.shape)
    for layer in adapter.layers:
        x = layer(x, audio)
    return adapter.proj(adapter.ln_f(x))


def _fresh_parts(n_queries: int, width: int, lm_width: int, rng: Rng, dtype):
    queries = rng.spawn("queries").normal((n_queries, width), std=0.02).astype(dtype)
    proj = Linear(width, lm_width, rng.spawn("proj"), std=0.1 / math.sqrt(width), dtype=dtype)
    return queries, proj


def init_from_decoder(donor: DonorDecoder, n_queries: int, lm_width: int, rng: Rng,
                      scratch: bool = False, width: int | None = None) -> QFormerAdapter:
    """Copy all donor decoder layers and the final norm; fresh queries (sigma=0.02) and
    projection. ``scratch=True`` draws the layers fresh instead (ablation control)."""
    if n_queries < 1:
        raise ConfigError(f"n_queries must be >= 1, got {n_queries}")
    if width is not None and width != donor.width:
        raise ConfigError(f"adapter width {width} != donor decoder width {donor.width}")
    dtype = donor.tok_emb.dtype
    queries, proj = _fresh_parts(n_queries, donor.width, lm_width, rng, dtype)
    if scratch:
        heads = donor.layers[0].self_attn.heads
        layers = make_decoder_layers(donor.width, heads, len(donor.layers), rng.spawn("scratch"), dtype)
        ln_f = LayerNorm(donor.width, dtype=dtype)
    else:
        layers = copy.deepcopy(donor.layers)
        ln_f = copy.deepcopy(donor.ln_f)
    adapter = QFormerAdapter(queries, layers, ln_f, proj)
    adapter.set_requires_grad(True)
    return adapter


# -- donor pretraining ----------------------------------------------------------------

def decoder_io(transcripts: Sequence[Sequence[int]], length: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BOS-shifted inputs, EOS-terminated targets, and a mask over real targets."""
    n = len(transcripts)
    inp = np.full((n, length), EOS, dtype=np.int64)
    tgt = np.full((n, length), EOS, dtype=np.int64)
    mask = np.zeros((n, length), dtype=bool)
    for i, t in enumerate(transcripts):
        if len(t) + 1 > length:
            raise DataError(f"transcript of {len(t)} tokens exceeds decoder length {length}")
        seq_in = [BOS, *t]
        seq_out = [*t, EOS]
        inp[i, : len(seq_in)] = seq_in
        tgt[i, : len(seq_out)] = seq_out
        mask[i, : len(seq_out)] = True
    return inp, tgt, mask


def transcription_accuracy(encoder: AudioEncoder, decoder: DonorDecoder, feats: np.ndarray,
                           transcripts: Sequence[Sequence[int]], batch: int = 64) -> float:
    """Teacher-forced token accuracy over targets (EOS included)."""
    length = max(len(t) for t in transcripts) + 1
    hit = total = 0
    with no_grad():
        for i in range(0, len(transcripts), batch):
            inp, tgt, mask = decoder_io(transcripts[i:i + batch], length)
            logits = decoder(inp, encoder(Tensor(feats[i:i + batch]))).data
            pred = logits.argmax(axis=-1)
            hit += int(((pred == tgt) & mask).sum())
            total += int(mask.sum())
    return hit / max(total, 1)


def pretrain_donor(train_feats: np.ndarray, train_transcripts: Sequence[Sequence[int]],
                   held_feats: np.ndarray, held_transcripts: Sequence[Sequence[int]],
                   model: ModelConfig, cfg: DonorConfig, rng: Rng, log=None, dtype=np.float32):
    """Train encoder + donor decoder with next-token cross-entropy on (audio, transcript) pairs.

    Stops once held-out accuracy reaches ``cfg.target_accuracy`` or after ``cfg.steps``.
    Returns (encoder, decoder, metrics).
    """
    from .optim import AdamW, clip_grad_norm, lr_at

    if len(train_transcripts) == 0 or len(held_transcripts) == 0:
        raise DataError("donor pretraining needs non-empty train and held-out sets")
    n_mels = train_feats.shape[-1]
    encoder = AudioEncoder(n_mels, model.audio_width, model.encoder_layers, model.heads,
                           rng.spawn("encoder"), dtype)
    decoder = DonorDecoder(model.vocab, model.audio_width, model.decoder_layers, model.heads,
                           model.decoder_max_len, rng.spawn("decoder"), dtype)
    params = {f"encoder.{k}": p for k, p in encoder.named_parameters()}
    params.update({f"decoder.{k}": p for k, p in decoder.named_parameters()})
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    length = min(model.decoder_max_len, max(len(t) for t in train_transcripts) + 1)
    n = len(train_transcripts)
    order = rng.spawn("order")
    perm, pos, epoch = order.spawn(0).permutation(n), 0, 0
    acc, step, history = 0.0, 0, []
    for step in range(1, cfg.steps + 1):
        bs = min(cfg.batch_size, n)
        if pos + bs > n:
            epoch += 1
            perm, pos = order.spawn(epoch).permutation(n), 0
        idx = perm[pos:pos + bs]
        pos += bs
        inp, tgt, mask = decoder_io([train_transcripts[j] for j in idx], length)
        encoder.zero_grad()
        decoder.zero_grad()
        loss = ops.cross_entropy(decoder(inp, encoder(Tensor(train_feats[idx].astype(dtype)))), tgt, mask)
        if not np.isfinite(loss.data):
            raise TrainingError(f"donor pretraining diverged at step {step}")
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step(lr_at(step, cfg.steps, cfg.lr, cfg.warmup_fraction))
        history.append(float(loss.data))
        if log is not None:
            log(step, float(loss.data))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = transcription_accuracy(encoder, decoder, held_feats, held_transcripts)
            if acc >= cfg.target_accuracy:
                break
    if acc < cfg.min_accuracy:
        raise TrainingError(
            f"donor reached only {acc:.3f} held-out token accuracy after {step} steps "
            f"(minimum {cfg.min_accuracy}); check the synthesis spec or audio geometry")
    metrics = {"held_out_accuracy": acc, "steps": step, "final_train_loss": history[-1],
               "reached_target": acc >= cfg.target_accuracy}
    return encoder, decoder, metrics
