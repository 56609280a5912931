"""Neural-net layers built on the gradient tape.

The heavy layers (linear, layer_norm, softmax, gelu) are single tape nodes
with hand-derived backward rules; attention is composed from primitives so
its gradient correctness reduces to theirs.
"""

import math

import numpy as np
from scipy.special import erf

from .tensor import (
    ContractError,
    Graph,
    Tensor,
    _result,
    add,
    div,
    matmul,
    mean,
    mul,
    narrow_rows,
    reshape,
    scale,
    sqrt,
    sum_,
    tensor,
    transpose,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear(x, w, b=None):
    """x [..., Din] @ w [Din, Dout] + b [Dout]."""
    if x.shape[-1] != w.shape[0]:
        raise ContractError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data += b.data
    out = _result(out_data, "linear")
    g = Graph.current()
    if g is not None and (x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)):
        x_data, w_data = x.data, w.data
        def backward(grad):
            g2 = grad.reshape(-1, grad.shape[-1])
            if x.requires_grad:
                x.accumulate_grad((grad @ w_data.T).reshape(x_data.shape))
            if w.requires_grad:
                x2 = x_data.reshape(-1, x_data.shape[-1])
                w.accumulate_grad(x2.T @ g2)
            if b is not None and b.requires_grad:
                b.accumulate_grad(g2.sum(axis=0))
        g.record(out, backward)
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(gamma.data * xhat + beta.data, "layer_norm")
    g = Graph.current()
    if g is not None and (x.requires_grad or gamma.requires_grad or beta.requires_grad):
        gamma_data = gamma.data
        def backward(grad):
            if gamma.requires_grad:
                gamma.accumulate_grad((grad * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(grad.reshape(-1, grad.shape[-1]).sum(axis=0))
            if x.requires_grad:
                dxhat = grad * gamma_data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x.accumulate_grad(inv_std * (dxhat - m1 - xhat * m2))
        g.record(out, backward)
    return out


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _result(x.data * cdf, "gelu")
    g = Graph.current()
    if g is not None and x.requires_grad:
        x_data = x.data
        def backward(grad):
            pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
            x.accumulate_grad(grad * (cdf + x_data * pdf))
        g.record(out, backward)
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, "softmax")
    g = Graph.current()
    if g is not None and x.requires_grad:
        def backward(grad):
            x.accumulate_grad(y * (grad - (grad * y).sum(axis=axis, keepdims=True)))
        g.record(out, backward)
    return out


def multi_head_self_attention(x, qkv_w, qkv_b, proj_w, proj_b, n_heads):
    """Bidirectional self-attention over x [B, T, D]; no masking of scores.

    qkv_w is [D, 3D] with the output columns ordered query | key | value.
    """
    batch, seq, dim = x.shape
    if dim % n_heads != 0:
        raise ContractError(f"width {dim} not divisible by {n_heads} heads")
    head_dim = dim // n_heads

    qkv = linear(x, qkv_w, qkv_b)                            # [B, T, 3D]
    qkv = reshape(qkv, (batch, seq, 3, dim))
    qkv = transpose(qkv, (0, 2, 1, 3))                       # [B, 3, T, D]

    def pick(i):
        h = narrow_rows(qkv, i, 1)                           # [B, 1, T, D]
        h = reshape(h, (batch, seq, n_heads, head_dim))
        return transpose(h, (0, 2, 1, 3))                    # [B, H, T, Dh]

    q, k, v = pick(0), pick(1), pick(2)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    attn = softmax(scores, axis=-1)                          # [B, H, T, T]
    ctx = matmul(attn, v)                                    # [B, H, T, Dh]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, seq, dim))
    return linear(ctx, proj_w, proj_b)


def drop_path(x, rate, rng, training):
    """Stochastic depth: zero whole samples of x [B, ...] with prob rate.

    Survivors are rescaled by 1/(1-rate) so the expectation is unchanged.
    Identity when not training or rate == 0.
    """
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop_path rate {rate} outside [0, 1)")
    keep = 1.0 - rate
    mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(mask_shape) < keep).astype(x.data.dtype) / keep
    out = _result(x.data * mask, "drop_path")
    g = Graph.current()
    if g is not None and x.requires_grad:
        def backward(grad):
            x.accumulate_grad(grad * mask)
        g.record(out, backward)
    return out


def mse(pred, target):
    """Mean squared error over all elements; target is a constant array."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ContractError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = _result(np.asarray(np.mean(diff * diff)), "mse")
    g = Graph.current()
    if g is not None and pred.requires_grad:
        n = diff.size
        def backward(grad):
            pred.accumulate_grad(grad * (2.0 / n) * diff)
        g.record(out, backward)
    return out


def cosine_mean(a, b, eps=1e-8):
    """Mean cosine similarity between matching rows of a and b [..., D].

    Composed from primitives so both operands receive gradients.
    """
    eps_t = tensor(eps)
    ab = sum_(mul(a, b), axis=-1)
    na = sqrt(add(sum_(mul(a, a), axis=-1), eps_t))
    nb = sqrt(add(sum_(mul(b, b), axis=-1), eps_t))
    cos = div(div(ab, na), nb)
    flat = reshape(cos, (cos.size,))
    return mean(flat)


def mlp(x, w1, b1, w2, b2):
    """Two-layer feed-forward with GELU in between."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)
