"""Differentiable tensor operations.

Every function validates shapes, computes the forward value with numpy and
registers a closure computing input gradients from the output gradient.
Reductions run in a fixed order, so repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, result


def _check_rank4(x: Tensor, what: str = "input") -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{what} must be a non-empty (n, c, h, w) tensor, got {x.shape}")


def _window(arr: np.ndarray, i: int, j: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return arr[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation of ``x`` with ``weight`` of shape (out, in, kh, kw).

    ``padding="same"`` pads ``k // 2`` zeros on every side, so odd kernels at
    stride 1 preserve the spatial size; ``"valid"`` pads nothing.
    """
    _check_rank4(x)
    if weight.ndim != 4:
        raise ShapeError(f"weight must be (out, in, kh, kw), got {weight.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"weight expects {ci} input channels, input has {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    wd = weight.data
    # accumulate per kernel offset in (o, n, oh, ow) layout; fixed loop order
    acc = np.zeros((o, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, oh, ow, stride)
            acc += np.tensordot(wd[:, :, i, j], patch, axes=([1], [1]))
    if bias is not None:
        acc += bias.data[:, None, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def backward(g: np.ndarray):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if weight.requires_grad:
                    patch = _window(xp, i, j, oh, ow, stride)
                    cols = np.ascontiguousarray(patch.transpose(1, 0, 2, 3)).reshape(c, -1)
                    gw[:, :, i, j] = g_t @ cols.T
                if gxp is not None:
                    back = (wd[:, :, i, j].T @ g_t).reshape(c, n, oh, ow)
                    _window(gxp, i, j, oh, ow, stride)[...] += back.transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return result(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return result(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so outputs stay strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    np.clip(s, lo, hi, out=s)
    return result(s, (x,), lambda g: (g * s * (1 - s),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis, per pixel."""
    _check_rank4(x)
    if x.shape[1] < 2:
        raise ShapeError("softmax over channels needs at least 2 channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return result(s, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.99, eps: float = 1e-5):
        return cls(
            np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps
        )


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Per-channel normalization followed by the affine map ``gamma * xhat + beta``.

    Train mode normalizes with biased batch statistics over (n, h, w) and moves
    the running statistics toward them; infer mode uses the running statistics.
    """
    _check_rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if state.running_mean.shape != (c,):
        raise ShapeError(f"running statistics track {state.running_mean.shape[0]} channels, input has {c}")
    dt = x.dtype
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + dt.type(state.eps))).astype(dt)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            gx = (
                inv_std[None, :, None, None]
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return result(out.astype(dt), (x, gamma, beta), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return result(np.ascontiguousarray(out), (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two."""
    _check_rank4(x)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return result(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may have a single channel broadcast over ``a``'s."""
    broadcast = False
    if a.shape != b.shape:
        if (
            a.ndim == 4
            and b.ndim == 4
            and b.shape[1] == 1
            and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3])
        ):
            broadcast = True
        else:
            raise ShapeError(f"mul needs identical shapes or a 1-channel b, got {a.shape} and {b.shape}")

    def backward(g):
        gb = g * a.data
        if broadcast:
            gb = gb.sum(axis=1, keepdims=True)
        return g * b.data, gb

    return result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, k: float) -> Tensor:
    return result(x.data * x.dtype.type(k), (x,), lambda g: (g * x.dtype.type(k),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape),))


def weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    """``sum(w_i * t_i)`` over same-shaped tensors."""
    shape = terms[0][1].shape
    for _, t in terms:
        if t.shape != shape:
            raise ShapeError("weighted_sum terms must share a shape")
    out = sum(w * t.data for w, t in terms)
    out = np.asarray(out, dtype=terms[0][1].dtype)
    return result(out, tuple(t for _, t in terms), lambda g: tuple(w * g for w, _ in terms))
