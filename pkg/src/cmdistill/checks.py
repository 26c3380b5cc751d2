"""Finite-difference checks over composed blocks, run in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .audio import AudioEncoder, conv_stem
from .distill import alignment_per_example, distill_loss, teacher_hidden, text_embeddings
from .nn import TransformerLayer
from .numcore import Rng, Tensor, grad_check, ops
from .toylm import PROMPT_PREFIX, PROMPT_SUFFIX, ToyLM, forward_mixed

F64 = np.float64


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(out * Tensor(weights))


def attention_layer_checks(rng: Rng, eps: float = 1e-5) -> dict[str, float]:
    layer = TransformerLayer(8, 2, rng.spawn("layer"), causal=True, cross=True, dtype=F64)
    x = rng.spawn("x").normal((2, 5, 8), dtype=F64)
    kv = rng.spawn("kv").normal((2, 6, 8), dtype=F64)
    w = rng.spawn("w").normal((2, 5, 8), dtype=F64)
    out = {
        "attention_layer/x": grad_check(lambda t: _weighted(layer(t, Tensor(kv)), w), x, eps),
        "attention_layer/kv": grad_check(lambda t: _weighted(layer(Tensor(x), t), w), kv, eps),
    }
    wq = layer.self_attn.w_q.weight

    def through_weight(t: Tensor) -> Tensor:
        saved = layer.self_attn.w_q.weight
        layer.self_attn.w_q.weight = t
        try:
            return _weighted(layer(Tensor(x), Tensor(kv)), w)
        finally:
            layer.self_attn.w_q.weight = saved

    out["attention_layer/w_q"] = grad_check(through_weight, wq.data, eps)
    return out


def conv_stem_checks(rng: Rng, eps: float = 1e-5) -> dict[str, float]:
    enc = AudioEncoder(4, 8, 1, 2, rng.spawn("enc"), dtype=F64)
    feats = rng.spawn("feats").normal((2, 9, 4), dtype=F64)
    probe = conv_stem(Tensor(feats), enc)
    w = rng.spawn("w").normal(probe.shape, dtype=F64)
    return {
        "conv_stem/features": grad_check(lambda t: _weighted(conv_stem(t, enc), w), feats, eps),
        "encoder/features": grad_check(lambda t: _weighted(enc(t), rng.spawn("w2").normal(probe.shape, dtype=F64)),
                                       feats, eps),
    }


def combined_loss_checks(rng: Rng, eps: float = 1e-5) -> dict[str, float]:
    lm = ToyLM(16, 8, 1, 2, 12, rng.spawn("lm"), dtype=F64).freeze()
    transcripts = [[12, 13], [14, 15, 12]]
    h_t = teacher_hidden(lm, transcripts)
    t_text, lens = text_embeddings(lm, transcripts)
    tokens = rng.spawn("tokens").normal((2, 4, 8), std=0.3, dtype=F64)

    def objective(t: Tensor) -> Tensor:
        h_s = forward_mixed(lm, PROMPT_PREFIX, t, PROMPT_SUFFIX)[..., -1, :]
        con = ops.mean(alignment_per_example(t, Tensor(t_text), lens))
        return ops.mean(distill_loss(h_s, h_t)) + con

    return {"combined_loss/audio_tokens": grad_check(objective, tokens, eps)}


CHECKS: dict[str, Callable[[Rng, float], dict[str, float]]] = {
    "attention": attention_layer_checks,
    "conv_stem": conv_stem_checks,
    "combined_loss": combined_loss_checks,
}


def run_all(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    root = Rng(seed).spawn("gradcheck")
    out: dict[str, float] = {}
    for name, fn in CHECKS.items():
        out.update(fn(root.spawn(name), eps))
    return out
