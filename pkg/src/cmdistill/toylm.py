"""Frozen teacher: a small decoder-only LM over a synthetic language.

The language has a fixed chat-style template

    BOS USER [SIL x k] x_1 .. x_N ASSISTANT y_1 .. EOS

where the transcript x follows a random first-order Markov chain and the
reply starts with a fixed permutation of x_1. When ``filler_slots`` is set,
k is drawn uniformly from 0..filler_slots-N so the LM learns to skip leading
silence tokens, the way a large LM shrugs off uninformative prefix tokens.
Two classification templates (``TASK_BIN`` and ``TASK_TRI`` markers) give
the label-scoring tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import LMPretrainConfig, ModelConfig
from .errors import DataError, DimensionError, TrainingError, UsageError
from .nn import LayerNorm, Module, Parameter, TransformerLayer
from .numcore import Rng, Tensor, no_grad, ops

EOS, BOS, USER, ASSISTANT, TASK_BIN, TASK_TRI, YES, NO, CLS0, CLS1, CLS2, SIL = range(12)
N_SPECIAL = 12
PROMPT_PREFIX = (BOS, USER)
PROMPT_SUFFIX = (ASSISTANT,)
TRI_LABELS = (CLS0, CLS1, CLS2)


class SyntheticLanguage:
    """Token inventory and generative rules, fully determined by the seed."""

    def __init__(self, vocab: int = 64, seed: int = 0, min_len: int = 3, max_len: int = 12,
                 concentration: float = 0.3, filler_slots: int = 0):
        if vocab <= N_SPECIAL + 2:
            raise DataError(f"vocabulary of {vocab} leaves no room for content tokens")
        if not 1 <= min_len <= max_len:
            raise DataError(f"bad transcript length range [{min_len}, {max_len}]")
        if filler_slots and filler_slots < max_len:
            raise DataError(f"filler_slots ({filler_slots}) must cover max_len ({max_len})")
        self.vocab = vocab
        self.filler_slots = filler_slots
        self.min_len = min_len
        self.max_len = max_len
        self.content = np.arange(N_SPECIAL, vocab)
        n = self.content.size
        rng = Rng(seed).spawn("language")
        self.transition = np.stack([rng.dirichlet(np.full(n, concentration)) for _ in range(n)])
        self.reply_map = self.content[rng.permutation(n)]

    @property
    def n_content(self) -> int:
        return int(self.content.size)

    def _cidx(self, tok: int) -> int:
        return int(tok) - N_SPECIAL

    def sample_transcript(self, rng: Rng) -> list[int]:
        n = int(rng.integers(self.min_len, self.max_len + 1))
        toks = [int(self.content[rng.integers(0, self.n_content)])]
        for _ in range(n - 1):
            row = self.transition[self._cidx(toks[-1])]
            toks.append(int(self.content[rng.choice(self.n_content, p=row)]))
        return toks

    def first_reply(self, transcript: Sequence[int]) -> int:
        return int(self.reply_map[self._cidx(transcript[0])])

    def binary_label(self, transcript: Sequence[int]) -> int:
        return YES if self._cidx(transcript[0]) >= self.n_content // 2 else NO

    def tri_label(self, transcript: Sequence[int]) -> int:
        return TRI_LABELS[self._cidx(transcript[-1]) % 3]

    def chat_sequence(self, transcript: Sequence[int], rng: Rng, max_tail: int = 3,
                      filler: int = 0) -> list[int]:
        reply = [self.first_reply(transcript)]
        for _ in range(int(rng.integers(0, max_tail + 1))):
            row = self.transition[self._cidx(reply[-1])]
            reply.append(int(self.content[rng.choice(self.n_content, p=row)]))
        return [BOS, USER, *[SIL] * filler, *transcript, ASSISTANT, *reply, EOS]

    def sample_sequence(self, rng: Rng) -> list[int]:
        x = self.sample_transcript(rng)
        k = int(rng.integers(0, self.filler_slots - len(x) + 1)) if self.filler_slots else 0
        kind = rng.uniform()
        if kind < 0.5:
            return self.chat_sequence(x, rng, filler=k)
        prompt = [BOS, USER, *[SIL] * k, *x]
        if kind < 0.75:
            return [*prompt, TASK_BIN, self.binary_label(x), EOS]
        return [*prompt, TASK_TRI, self.tri_label(x), EOS]


@dataclass
class SyntheticCorpus:
    language: SyntheticLanguage
    train: list[list[int]]
    held_out: list[list[int]]

    @classmethod
    def generate(cls, language: SyntheticLanguage, n_train: int, n_held_out: int,
                 rng: Rng) -> "SyntheticCorpus":
        train = [language.sample_sequence(rng.spawn(("train", i))) for i in range(n_train)]
        seen = {tuple(s) for s in train}
        held: list[list[int]] = []
        i = 0
        while len(held) < n_held_out:
            s = language.sample_sequence(rng.spawn(("held", i)))
            i += 1
            if tuple(s) not in seen:
                held.append(s)
        return cls(language, train, held)

    @property
    def vocab(self) -> int:
        return self.language.vocab


class ToyLM(Module):
    """Token embeddings E, learned positions, causal stack, final norm, untied output matrix O."""

    def __init__(self, vocab: int, width: int, n_layers: int, heads: int, max_len: int, rng: Rng,
                 dtype=np.float32):
        self.tok_emb = Parameter(rng.spawn("E").normal((vocab, width), std=0.1).astype(dtype))
        self.pos_emb = Parameter(rng.spawn("P").normal((max_len, width), std=0.02).astype(dtype))
        self.layers = [TransformerLayer(width, heads, rng.spawn(("layer", i)), causal=True,
                                        n_layers=n_layers, dtype=dtype) for i in range(n_layers)]
        self.ln_f = LayerNorm(width, dtype=dtype)
        self.out_emb = Parameter(rng.spawn("O").normal((vocab, width), std=1 / math.sqrt(width))
                                 .astype(dtype))
        self.vocab = vocab
        self.width = width
        self.max_len = max_len
        self.frozen = False

    def freeze(self) -> "ToyLM":
        self.set_requires_grad(False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def embed_text(lm: ToyLM, tokens) -> Tensor:
    """Rows of E at ``tokens`` (no positions)."""
    idx = np.asarray(tokens, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= lm.vocab):
        bad = idx[(idx < 0) | (idx >= lm.vocab)][0]
        raise DataError(f"token {int(bad)} outside vocabulary of {lm.vocab}")
    return ops.embedding(lm.tok_emb, idx)


def add_positions(lm: ToyLM, embeds: Tensor) -> Tensor:
    length = embeds.shape[-2]
    if length > lm.max_len:
        raise DimensionError(f"sequence of {length} exceeds position table ({lm.max_len})")
    return embeds + lm.pos_emb[:length]


def forward_hidden(lm: ToyLM, embeds: Tensor) -> Tensor:
    """Causal stack + final norm over already-positioned embeddings."""
    if embeds.shape[-1] != lm.width:
        raise DimensionError(f"LM width {lm.width} vs embeddings {embeds.shape}")
    x = embeds
    for layer in lm.layers:
        x = layer(x)
    return lm.ln_f(x)


def forward_embeds(lm: ToyLM, embeds: Tensor) -> Tensor:
    return forward_hidden(lm, add_positions(lm, embeds))


def forward_text(lm: ToyLM, tokens) -> Tensor:
    return forward_embeds(lm, embed_text(lm, tokens))


def mixed_embeds(lm: ToyLM, prefix: Sequence[int], injected: Tensor, suffix: Sequence[int]) -> Tensor:
    """embed(prefix) + injected + embed(suffix), batched over leading axes of ``injected``."""
    if injected.shape[-1] != lm.width:
        raise DimensionError(f"injected width {injected.shape[-1]} != LM width {lm.width}")
    lead = injected.shape[:-2]
    parts = []
    for toks in (prefix, None, suffix):
        if toks is None:
            parts.append(injected)
            continue
        if len(toks) == 0:
            continue
        e = embed_text(lm, toks)
        if lead:
            e = ops.broadcast_to(e, lead + e.shape)
        parts.append(e)
    return ops.concat(parts, axis=-2) if len(parts) > 1 else parts[0]


def forward_mixed(lm: ToyLM, prefix: Sequence[int], injected: Tensor, suffix: Sequence[int]) -> Tensor:
    return forward_embeds(lm, mixed_embeds(lm, prefix, injected, suffix))


def next_token_logits(lm: ToyLM, h: Tensor) -> Tensor:
    """O h (softmax left to callers)."""
    if h.shape[-1] != lm.width:
        raise DimensionError(f"hidden width {h.shape[-1]} != LM width {lm.width}")
    return ops.matmul(h, ops.transpose(lm.out_emb))


def score_labels(lm: ToyLM, context_embeds: Tensor, labels: Sequence[Sequence[int]]) -> np.ndarray:
    """Sum of log P(label_i | context, label_<i) for each candidate label."""
    if not labels:
        raise DataError("no labels to score")
    scores = []
    with no_grad():
        for label in labels:
            if len(label) == 0:
                raise DataError("empty label")
            seq = ops.concat([context_embeds, embed_text(lm, label)], axis=-2)
            hidden = forward_embeds(lm, seq)
            c = context_embeds.shape[-2]
            logp = ops.log_softmax(next_token_logits(lm, hidden[c - 1: c - 1 + len(label)])).data
            scores.append(float(sum(logp[i, tok] for i, tok in enumerate(label))))
    return np.array(scores)


def greedy_decode(lm: ToyLM, context_embeds: Tensor, max_len: int, eos: int = EOS) -> list[int]:
    """Append the argmax token (lowest index on ties) until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    out: list[int] = []
    seq = context_embeds
    with no_grad():
        for _ in range(max_len):
            logits = next_token_logits(lm, forward_embeds(lm, seq)[-1]).data
            tok = int(np.argmax(logits))
            if tok == eos:
                break
            out.append(tok)
            seq = ops.concat([seq, embed_text(lm, [tok])], axis=0)
    return out


# -- pretraining ------------------------------------------------------------------

def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = EOS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs/targets for next-token prediction plus a mask over real targets."""
    length = max(len(s) for s in seqs) - 1
    inp = np.full((len(seqs), length), pad, dtype=np.int64)
    tgt = np.full((len(seqs), length), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        inp[i, :n] = s[:-1]
        tgt[i, :n] = s[1:]
        mask[i, :n] = True
    return inp, tgt, mask


def lm_nll(lm: ToyLM, seqs: Sequence[Sequence[int]]) -> tuple[float, int]:
    """Total negative log-likelihood and target count."""
    inp, tgt, mask = pad_sequences(seqs)
    with no_grad():
        logits = next_token_logits(lm, forward_text(lm, inp)).data.astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum()), int(mask.sum())


def perplexity(lm: ToyLM, seqs: Sequence[Sequence[int]], batch: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch):
        nll, n = lm_nll(lm, seqs[i:i + batch])
        total += nll
        count += n
    return math.exp(total / count)


def unigram_perplexity(train: Sequence[Sequence[int]], held_out: Sequence[Sequence[int]],
                       vocab: int) -> float:
    """Add-one smoothed unigram model over target tokens."""
    counts = np.ones(vocab)
    for s in train:
        np.add.at(counts, np.asarray(s[1:]), 1)
    logp = np.log(counts / counts.sum())
    toks = np.concatenate([np.asarray(s[1:]) for s in held_out])
    return float(np.exp(-logp[toks].mean()))


def pretrain_lm(corpus: SyntheticCorpus, model: ModelConfig, cfg: LMPretrainConfig, rng: Rng,
                log=None, dtype=np.float32) -> tuple[ToyLM, dict]:
    """Next-token training on the corpus; returns the frozen LM and summary metrics."""
    from .optim import AdamW, clip_grad_norm, lr_at

    if not corpus.train:
        raise DataError("empty LM corpus")
    lm = ToyLM(corpus.vocab, model.lm_width, model.lm_layers, model.lm_heads, model.lm_max_len,
               rng.spawn("init"), dtype)
    params = dict(lm.named_parameters())
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    order_rng = rng.spawn("order")
    n = len(corpus.train)
    perm, pos = order_rng.spawn(0).permutation(n), 0
    epoch = 0
    history = []
    for step in range(cfg.steps):
        if pos + cfg.batch_size > n:
            epoch += 1
            perm, pos = order_rng.spawn(epoch).permutation(n), 0
        batch = [corpus.train[j] for j in perm[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size
        inp, tgt, mask = pad_sequences(batch)
        lm.zero_grad()
        loss = ops.cross_entropy(next_token_logits(lm, forward_text(lm, inp)), tgt, mask)
        if not np.isfinite(loss.data):
            raise TrainingError(f"LM pretraining diverged at step {step}")
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step(lr_at(step + 1, cfg.steps, cfg.lr, cfg.warmup_fraction))
        history.append(float(loss.data))
        if log is not None:
            log(step + 1, float(loss.data))
    lm.freeze()
    ppl = perplexity(lm, corpus.held_out)
    uni = unigram_perplexity(corpus.train, corpus.held_out, corpus.vocab)
    metrics = {"held_out_perplexity": ppl, "unigram_perplexity": uni,
               "final_train_loss": history[-1] if history else float("nan")}
    if ppl > (1.0 - cfg.min_improvement) * uni:
        raise TrainingError(
            f"teacher perplexity {ppl:.3f} does not beat unigram {uni:.3f} by {cfg.min_improvement:.0%}")
    return lm, metrics
