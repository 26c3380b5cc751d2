"""Differentiable tensor operations.

All functions accept Tensors (or array-likes for non-differentiable inputs)
and return new Tensors. Broadcasting follows numpy; gradients are summed
back to the input shapes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DimensionError, NumericDomainError, UsageError
from .tensor import Tensor, as_tensor

PROB_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped below (zero gradient there)."""
    x = a.data
    if floor is not None:
        x = np.maximum(x, floor)
    out = np.log(x)

    def bw(g):
        gx = g / x
        if floor is not None:
            gx = np.where(a.data >= floor, gx, 0.0).astype(a.dtype, copy=False)
        return (gx,)

    return Tensor._make(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return Tensor._make(out, (a,), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    1-D operands are treated as a row (left) or column (right) vector.
    """
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            # fold batch axes: (..., k) @ (k, n)
            k = a.shape[-1]
            ga = np.matmul(g, b.data.T)
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), bw)


# -- reductions and shape -----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor._make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradient scatters into the looked-up rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return Tensor._make(out, (table,), bw)


# -- normalisation and probabilities ------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what}: non-finite input")


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (bool, broadcastable) marks allowed entries;
    disallowed entries get probability exactly zero."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = as_tensor(x), _lift(gain, x), _lift(bias, x)
    w = x.shape[-1]
    if gain.shape != (w,) or bias.shape != (w,):
        raise DimensionError(f"layer_norm: last extent {w} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead)
        gbias = np.sum(g, axis=lead)
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), bw)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        unit = np.where(n > 0, x.data / safe, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return Tensor._make(np.squeeze(n, axis=axis), (x,), bw)


def kl_divergence(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) = sum p (log p - log q) along ``axis``.

    ``0 log 0`` counts as zero; both logs are clamped at ``PROB_FLOOR``, so KL(p || p) is exactly 0.
    """
    p, q = _pair(p, q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    qc = np.maximum(qd, PROB_FLOOR)
    pos = pd > 0
    logp = np.log(np.where(pos, np.maximum(pd, PROB_FLOOR), 1.0))
    logq = np.log(qc)
    terms = np.where(pos, pd * (logp - logq), 0.0)
    out = np.sum(terms, axis=axis)

    def bw(g):
        ge = np.expand_dims(g, axis)
        gp = ge * np.where(pos, logp - logq + 1.0, 0.0)
        gq = ge * np.where(qd >= PROB_FLOOR, -pd / qc, 0.0)
        return gp.astype(pd.dtype, copy=False), gq.astype(qd.dtype, copy=False)

    return Tensor._make(np.asarray(out, dtype=pd.dtype), (p, q), bw)


def kl_from_logits(logits_p, logits_q, axis: int = -1) -> Tensor:
    """KL(softmax(logits_p) || softmax(logits_q)) via log-softmax; exact, no clamping."""
    lp = log_softmax(as_tensor(logits_p), axis=axis)
    lq = log_softmax(as_tensor(logits_q), axis=axis)
    return sum(mul(exp(lp), sub(lp, lq)), axis=axis)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``mask`` (same shape as targets) selects which positions count.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise UsageError("cross_entropy: mask selects no positions")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    out = -np.sum(picked * m) / count

    def bw(g):
        probs = e / s
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return ((probs - onehot) * (m[..., None] * (g / count)),)

    return Tensor._make(np.asarray(out, dtype=logits.dtype), (logits,), bw)


# -- convolution ----------------------------------------------------------------

def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D cross-correlation over the time axis.

    x: (..., T, C_in); kernel: (K, C_in, C_out) -> (..., T', C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be K x C_in x C_out, got {kernel.shape}")
    k, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel length must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigError(f"conv1d stride must be 1 or 2, got {stride}")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d channels: input {x.shape} vs kernel {kernel.shape}")
    t = x.shape[-2]
    t_out = conv_output_length(t, k, stride, padding)
    if t_out < 1:
        raise DimensionError(f"conv1d output length {t_out} < 1 (T={t}, K={k}, pad={padding})")
    pad_width = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (0, 0)]
    xp = np.pad(x.data, pad_width)
    # windows[..., t', j, c] = xp[..., t'*stride + j, c]
    taps = [xp[..., j: j + stride * (t_out - 1) + 1: stride, :] for j in range(k)]
    cols = np.stack(taps, axis=-2)  # (..., T', K, C_in)
    flat = cols.reshape(cols.shape[:-2] + (k * cin,))
    wmat = kernel.data.reshape(k * cin, cout)
    out = flat @ wmat
    parents: list[Tensor] = [x, kernel]
    if bias is not None:
        bias = _lift(bias, x)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gw = np.tensordot(flat, g, axes=(lead, lead)).reshape(k, cin, cout)
        gcols = (g @ wmat.T).reshape(cols.shape)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j: j + stride * (t_out - 1) + 1: stride, :] += gcols[..., j, :]
        gx = gxp[..., padding: padding + t, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(np.sum(g, axis=lead))
        return tuple(grads)

    return Tensor._make(out, parents, bw)
