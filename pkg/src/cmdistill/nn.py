"""Transformer building blocks shared by the audio encoder, donor decoder,
Q-Former and teacher LM.

Inputs are ``(..., L, width)``; any leading axes are treated as batch.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .numcore import Rng, Tensor, ops


class Parameter(Tensor):
    """A trainable tensor owned by a Module."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Minimal parameter container; attribute assignment order fixes parameter order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _normal(rng: Rng, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(shape, std=std, dtype=np.float64).astype(dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, std: float | None = None,
                 dtype=np.float32):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = _normal(rng, (d_in, d_out), std, dtype)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ConfigError(f"layer norm eps must be > 0, got {eps}")
        self.gain = Parameter(np.ones(width, dtype=dtype))
        self.bias = Parameter(np.zeros(width, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: Rng, std: float = 0.02, dtype=np.float32):
        self.weight = _normal(rng, (count, width), std, dtype)

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.weight.shape[0]):
            raise DimensionError(f"embedding index out of range [0, {self.weight.shape[0]})")
        return ops.embedding(self.weight, idx)


def sinusoidal_positions(length: int, width: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos table: row p is [sin(p w_0), cos(p w_0), sin(p w_1), ...]
    with w_i = 10000^(-2i/width)."""
    if width % 2:
        raise ConfigError(f"sinusoidal positions need an even width, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    table = np.zeros((length, width), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


def causal_mask(length: int) -> np.ndarray:
    """Boolean L x L mask, True where query i may attend key j (j <= i)."""
    return np.tril(np.ones((length, length), dtype=bool))


class AttentionBlock(Module):
    """Multi-head attention, softmax(Q (K kv)^T / sqrt(d_k)) (V kv) per head, then W_o."""

    def __init__(self, width: int, heads: int, rng: Rng, causal: bool = False,
                 out_std: float | None = None, dtype=np.float32):
        if heads < 1 or width % heads:
            raise ConfigError(f"width {width} not divisible by head count {heads}")
        self.w_q = Linear(width, width, rng.spawn("q"), bias=False, dtype=dtype)
        self.w_k = Linear(width, width, rng.spawn("k"), bias=False, dtype=dtype)
        self.w_v = Linear(width, width, rng.spawn("v"), bias=False, dtype=dtype)
        self.w_o = Linear(width, width, rng.spawn("o"), bias=False, std=out_std, dtype=dtype)
        self.width = width
        self.heads = heads
        self.d_k = width // heads
        self.causal = causal

    def _split(self, t: Tensor) -> Tensor:
        # (..., L, w) -> (..., heads, L, d_k)
        lead = t.shape[:-2]
        t = t.reshape(lead + (t.shape[-2], self.heads, self.d_k))
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return t.transpose(axes)

    def _merge(self, t: Tensor) -> Tensor:
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        t = t.transpose(axes)
        return t.reshape(t.shape[:-2] + (self.width,))

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask=None) -> Tensor:
        return attend(self, x, x if kv is None else kv, mask)


def attend(block: AttentionBlock, queries_src: Tensor, kv_src: Tensor, mask=None) -> Tensor:
    """Attention of ``queries_src`` (L_q x w) over ``kv_src`` (L_kv x w).

    ``mask`` is a boolean L_q x L_kv array of allowed pairs; a causal block
    combines it with the lower-triangular mask.
    """
    if queries_src.shape[-1] != block.width or kv_src.shape[-1] != block.width:
        raise DimensionError(
            f"attention width {block.width} vs queries {queries_src.shape}, keys {kv_src.shape}")
    lq, lkv = queries_src.shape[-2], kv_src.shape[-2]
    allowed = None
    if mask is not None:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape[-2:] != (lq, lkv):
            raise DimensionError(f"mask shape {allowed.shape} != ({lq}, {lkv})")
    if block.causal:
        if lq != lkv:
            raise DimensionError(f"causal attention needs square scores, got {lq} x {lkv}")
        cm = causal_mask(lq)
        allowed = cm if allowed is None else (allowed & cm)
    q = block._split(block.w_q(queries_src))
    k = block._split(block.w_k(kv_src))
    v = block._split(block.w_v(kv_src))
    kt = ops.swapaxes(k, -1, -2)
    scores = ops.matmul(q, kt) * (1.0 / math.sqrt(block.d_k))
    if allowed is not None and allowed.ndim > 2:
        allowed = np.expand_dims(allowed, -3)  # broadcast over heads
    probs = ops.softmax(scores, axis=-1, mask=allowed)
    ctx = ops.matmul(probs, v)
    return block.w_o(block._merge(ctx))


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: Rng, out_std: float | None = None,
                 dtype=np.float32):
        self.fc1 = Linear(width, hidden, rng.spawn("fc1"), dtype=dtype)
        self.fc2 = Linear(hidden, width, rng.spawn("fc2"), std=out_std, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm residual layer: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, width: int, heads: int, rng: Rng, causal: bool = False,
                 cross: bool = False, ffn_mult: int = 4, n_layers: int = 1, dtype=np.float32):
        out_std = 1.0 / math.sqrt(width * 2 * max(n_layers, 1))
        self.ln_self = LayerNorm(width, dtype=dtype)
        self.self_attn = AttentionBlock(width, heads, rng.spawn("self"), causal=causal,
                                        out_std=out_std, dtype=dtype)
        if cross:
            self.ln_cross = LayerNorm(width, dtype=dtype)
            self.cross_attn = AttentionBlock(width, heads, rng.spawn("cross"), causal=False,
                                             out_std=out_std, dtype=dtype)
        else:
            self.ln_cross = None
            self.cross_attn = None
        self.ln_ffn = LayerNorm(width, dtype=dtype)
        self.ffn = FeedForward(width, ffn_mult * width, rng.spawn("ffn"), out_std=out_std,
                               dtype=dtype)
        self.width = width

    def __call__(self, x: Tensor, cross_kv: Tensor | None = None, mask=None) -> Tensor:
        return layer_forward(self, x, cross_kv, mask)


def layer_forward(layer: TransformerLayer, x: Tensor, cross_kv: Tensor | None = None,
                  mask=None) -> Tensor:
    if x.shape[-1] != layer.width:
        raise DimensionError(f"layer width {layer.width} vs input {x.shape}")
    if cross_kv is not None and layer.cross_attn is None:
        raise UsageError("cross_kv given to a layer without a cross-attention block")
    h = layer.ln_self(x)
    x = x + attend(layer.self_attn, h, h, mask)
    if layer.cross_attn is not None and cross_kv is not None:
        h = layer.ln_cross(x)
        x = x + attend(layer.cross_attn, h, cross_kv)
    return x + layer.ffn(layer.ln_ffn(x))
