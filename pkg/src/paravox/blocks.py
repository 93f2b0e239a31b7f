"""Reusable network blocks.

The workhorse is the lightweight-convolution block: a gated linear unit, a
depthwise convolution whose kernel taps are softmax-normalized over time and
shared across channel groups ("heads"), then a 4x feedforward.  Both it and
the self-attention block use pre-norm residual sublayers.  Masks are float
[B, T] arrays (1 = valid); blocks zero their masked rows on exit so padding
never leaks.
"""

from __future__ import annotations

import numpy as np

from . import tensor as pt
from .errors import ShapeError
from .module import Linear, Module
from .tensor import Parameter, Tensor


def apply_mask(x: Tensor, mask) -> Tensor:
    if mask is None:
        return x
    return x * Tensor(np.asarray(mask, dtype=pt.active_dtype())[:, :, None])


def sinusoidal_embedding(positions, dim: int) -> Tensor:
    """Interleaved sin/cos embedding; accepts real-valued positions.

    Channel 2i is sin(p / 10000^(2i/dim)), channel 2i+1 the matching cos.
    """
    if dim % 2 != 0:
        raise ShapeError(f"sinusoidal embedding dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    i = np.arange(dim // 2, dtype=np.float64)
    rates = 10000.0 ** (2.0 * i / dim)
    angles = pos[..., None] / rates
    out = np.empty(pos.shape + (dim,), dtype=pt.active_dtype())
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return Tensor(out)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim), "gain")
        self.bias = Parameter(np.zeros(dim), "bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return pt.layer_norm(x, self.gain, self.bias, self.eps)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Time-axis convolution of [B, T, d_in] with [k, d_in, d_out], SAME zero padding.

    Output length is ceil(T / stride).  Left padding is fixed at k // 2 so the
    window alignment at valid positions never depends on how much trailing
    padding a batch carries.
    """
    k = weight.shape[0]
    t = x.shape[1]
    t_out = -(-t // stride)
    left = k // 2
    right = max((t_out - 1) * stride + k - left - t, 0)
    xp = pt.pad_axis(x, 1, left, right)
    out = None
    last = stride * (t_out - 1)
    for j in range(k):
        term = pt.matmul(xp[:, j:j + last + 1:stride, :], weight[j])
        out = term if out is None else out + term
    return out + bias


class LightweightConv(Module):
    """Depthwise conv sharing one kernel per head, taps softmax-normalized.

    Centered (non-causal) window with zero padding; masked positions neither
    contribute nor emit.
    """

    def __init__(self, dim: int, heads: int, kernel_size: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"heads ({heads}) must divide channel count ({dim})")
        if kernel_size % 2 != 1:
            raise ShapeError(f"kernel width must be odd for a centered window, got {kernel_size}")
        self.dim = dim
        self.heads = heads
        self.kernel_size = kernel_size
        self.kernel = Parameter(rng.normal(0.0, 0.1, size=(heads, kernel_size)), "kernel")

    def normalized_kernel(self) -> Tensor:
        return pt.softmax(self.kernel, axis=1)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        b, t, d = x.shape
        h, k = self.heads, self.kernel_size
        w = self.normalized_kernel()
        xm = apply_mask(x, mask)
        xp = pt.pad_axis(xm, 1, k // 2, k // 2)
        acc = None
        for j in range(k):
            seg = pt.reshape(xp[:, j:j + t, :], (b, t, h, d // h))
            term = seg * pt.reshape(w[:, j], (1, 1, h, 1))
            acc = term if acc is None else acc + term
        return apply_mask(pt.reshape(acc, (b, t, d)), mask)


class LConvBlock(Module):
    """Pre-norm GLU -> lightweight conv sublayer, then pre-norm 4x FF sublayer.

    Pre-norm residuals: x + Conv(GLU(LN(x))), then x + FF(LN(x)).  A post-norm
    arrangement (norm after each residual add) plateaus far short of an overfit
    at desk scale, so normalization feeds each sublayer instead.
    """

    def __init__(self, dim: int, heads: int, kernel_size: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        self.norm1 = LayerNorm(dim)
        self.glu_proj = Linear(dim, 2 * dim, rng)
        self.conv = LightweightConv(dim, heads, kernel_size, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim, rng)
        self.ff2 = Linear(4 * dim, dim, rng)
        self.dim = dim
        self.dropout = dropout

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        d = self.dim
        g = self.glu_proj(self.norm1(x))
        h = g[:, :, :d] * pt.sigmoid(g[:, :, d:])
        h = self.conv(h, mask)
        x = x + pt.dropout(h, self.dropout, rng, training)
        f = pt.dropout(pt.relu(self.ff1(self.norm2(x))), self.dropout, rng, training)
        x = x + self.ff2(f)
        return apply_mask(x, mask)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"heads ({heads}) must divide model dim ({dim})")
        self.q = Linear(dim, dim, rng)
        # A key bias shifts every score in a row equally, which softmax cancels;
        # leaving it out avoids carrying an unlearnable null direction.
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim

    def __call__(self, x: Tensor, mask=None, return_weights: bool = False):
        b, t, d = x.shape
        h = self.heads
        dh = d // h

        def split(z):
            return pt.transpose(pt.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = pt.matmul(q, pt.transpose(k, (0, 1, 3, 2))) * (dh ** -0.5)
        if mask is not None:
            neg = (np.asarray(mask, dtype=pt.active_dtype()) - 1.0) * 1e9
            scores = scores + Tensor(neg[:, None, None, :])
        weights = pt.softmax(scores, axis=-1)
        ctx = pt.matmul(weights, v)
        merged = pt.reshape(pt.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        out = self.out(merged)
        if return_weights:
            return out, weights
        return out


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + Attn(LN(x)), then x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.1):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim, rng)
        self.ff2 = Linear(4 * dim, dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        a = self.attn(self.norm1(x), mask)
        x = x + pt.dropout(a, self.dropout, rng, training)
        f = pt.dropout(pt.relu(self.ff1(self.norm2(x))), self.dropout, rng, training)
        x = x + self.ff2(f)
        return apply_mask(x, mask)


class ConvBlock(Module):
    """Encoder convolution: conv1d (odd k, SAME) -> layer norm -> ReLU -> dropout."""

    def __init__(self, d_in: int, d_out: int, kernel_size: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        if kernel_size % 2 != 1:
            raise ShapeError(f"conv block kernel width must be odd, got {kernel_size}")
        scale = np.sqrt(6.0 / (kernel_size * d_in + d_out))
        self.weight = Parameter(rng.uniform(-scale, scale, size=(kernel_size, d_in, d_out)), "weight")
        self.bias = Parameter(np.zeros(d_out), "bias")
        self.norm = LayerNorm(d_out)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        h = conv1d(apply_mask(x, mask), self.weight, self.bias)
        h = pt.dropout(pt.relu(self.norm(h)), self.dropout, rng, training)
        return apply_mask(h, mask)


def lightweight_param_count(heads: int, kernel_size: int) -> int:
    return heads * kernel_size


def standard_conv_param_count(dim: int, kernel_size: int) -> int:
    return dim * dim * kernel_size
