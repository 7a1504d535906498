"""Differentiable tensor operations.

Each op computes its result with numpy and, when recording, registers a
closure mapping the output gradient to input gradients. Binary elementwise
ops broadcast numpy-style; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf
from scipy.special import expit as _sigmoid

from moma.core.tensor import Tensor, as_tensor, count_macs, make_output
from moma.errors import ContractError, DimensionError

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
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
    return as_tensor(a), as_tensor(b)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_output("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_output("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_output("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_output("neg", -a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def bw(g):
        return (unbroadcast(np.where(take_a, g, 0.0), a.shape) if a.requires_grad else None,
                unbroadcast(np.where(take_a, 0.0, g), b.shape) if b.requires_grad else None)

    return make_output("maximum", np.where(take_a, a.data, b.data), (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_output("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_output("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return make_output("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    y = a.data * s
    return make_output("silu", y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return make_output("gelu", x * cdf, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    return make_output("softplus", y, (a,), lambda g: (g * _sigmoid(x),))


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    count_macs("matmul", out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_output("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    x, weight = _pair(x, weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    count_macs("linear", out.size * weight.shape[0])
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_output("linear", out, inputs, bw)


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_output("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return make_output("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_output("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_output("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(a.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_output("getitem", a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_output("concat", np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_output("stack", np.stack([t.data for t in ts], axis=axis), ts, bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros(a.shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return make_output("take", np.take(a.data, idx, axis=axis), (a,), bw)


def gather_tokens(x, perms: np.ndarray) -> Tensor:
    """Stack ``D`` token reorderings: ``out[d][..., i, :] = x[..., perms[d, i], :]``.

    ``x`` has shape (..., N, E); ``perms`` is an integer array (D, N) whose rows
    are permutations of ``range(N)``. Output shape is (D, ..., N, E).
    """
    x = as_tensor(x)
    perms = np.asarray(perms, dtype=np.intp)
    out = np.stack([x.data[..., p, :] for p in perms])

    def bw(g):
        gx = np.zeros(x.shape)
        for d, p in enumerate(perms):
            gx[..., p, :] += g[d]
        return (gx,)

    return make_output("gather_tokens", out, (x,), bw)


def scatter_tokens(y, perms: np.ndarray) -> Tensor:
    """Inverse of :func:`gather_tokens` per slice: ``out[d][..., perms[d, i], :] = y[d][..., i, :]``."""
    y = as_tensor(y)
    perms = np.asarray(perms, dtype=np.intp)
    out = np.empty(y.shape)
    for d, p in enumerate(perms):
        out[d][..., p, :] = y.data[d]

    def bw(g):
        return (np.stack([g[d][..., p, :] for d, p in enumerate(perms)]),)

    return make_output("scatter_tokens", out, (y,), bw)


# -- normalisation and probability ----------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", y, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_output("log_softmax", y, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma = _pair(x, gamma)
    beta = as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return make_output("layer_norm", out, (x, gamma, beta), bw)


def causal_conv1d(u, weight, bias) -> Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``u`` is (..., L, E), ``weight`` (..., E, K) and ``bias`` (..., E), with the
    leading axes of the parameters broadcasting against those of ``u``.
    ``out[t] = bias + sum_k weight[k] * u[t - (K - 1) + k]`` (zero left padding),
    so ``weight[..., K-1]`` multiplies the current step.
    """
    u, weight = _pair(u, weight)
    bias = as_tensor(bias)
    L, E = u.shape[-2:]
    K = weight.shape[-1]
    if weight.shape[-2] != E or bias.shape[-1] != E:
        raise DimensionError(f"causal_conv1d: channels {E} vs weight {weight.shape}, bias {bias.shape}")
    w = weight.data[..., None, :, :]  # (..., 1, E, K)
    b = bias.data[..., None, :]
    out = np.zeros(np.broadcast_shapes(u.shape, w.shape[:-1], b.shape)) + b
    for k in range(K):
        s = K - 1 - k
        if s >= L:
            continue
        out[..., s:, :] += w[..., k] * u.data[..., : L - s, :]

    def bw(g):
        gu = gw = gb = None
        if u.requires_grad:
            full = np.zeros(g.shape)
            for k in range(K):
                s = K - 1 - k
                if s >= L:
                    continue
                full[..., : L - s, :] += g[..., s:, :] * w[..., k]
            gu = unbroadcast(full, u.shape)
        if weight.requires_grad:
            cols = []
            for k in range(K):
                s = K - 1 - k
                if s >= L:
                    cols.append(np.zeros(g.shape[:-2] + (E,)))
                    continue
                cols.append((g[..., s:, :] * u.data[..., : L - s, :]).sum(axis=-2))
            gw = unbroadcast(np.stack(cols, axis=-1), weight.shape)
        if bias.requires_grad:
            gb = unbroadcast(g.sum(axis=-2), bias.shape)
        return gu, gw, gb

    return make_output("causal_conv1d", out, (u, weight, bias), bw)


# -- losses ----------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return make_output("cross_entropy", np.asarray(loss), (logits,), bw)


def mse(a, b) -> Tensor:
    a, b = _pair(a, b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        gd = g * 2.0 * diff / n
        return (unbroadcast(gd, a.shape) if a.requires_grad else None,
                unbroadcast(-gd, b.shape) if b.requires_grad else None)

    return make_output("mse", np.asarray((diff * diff).mean()), (a, b), bw)
