"""Differentiable primitives.

Each op computes its forward value with numpy and returns a node whose
backward closure maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_node

logger = logging.getLogger(__name__)

EPS_CLAMP = 1e-7

# Branch decisions of piecewise ops, collected while a trace is active.
_branch_log: list | None = None


@contextmanager
def branch_trace():
    """Collect the branch decisions (ReLU masks, max-pool winners, clamps and
    any :func:`note_branch` data) made inside the block into a list."""
    global _branch_log
    outer, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = outer


def note_branch(decision) -> None:
    """Record a discrete decision under an active :func:`branch_trace`."""
    if _branch_log is not None:
        _branch_log.append(np.asarray(decision).tobytes())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, negative_slope: float) -> Tensor:
    """``x`` where positive, ``negative_slope * x`` elsewhere."""
    mask = x.data > 0
    note_branch(mask)
    scale = np.where(mask, 1.0, negative_slope)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


# --- shape and reduction ----------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_node(out, (x,), _bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(x.data[idx], (x,), _bw)


def take_rows(x: Tensor, rows) -> Tensor:
    return index(x, np.asarray(rows, dtype=np.intp))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# --- layers -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return make_node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape N x F."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"fully_connected: input {x.shape} features do not match weight {weight.shape} rows"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} vs output width {weight.shape[1]}")
    out = x.data @ weight.data + bias.data
    return make_node(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKhKw kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input channels C={c} != weight input channels I={i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: N, C, Ho, Wo, Kh, Kw
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, Kh, Kw
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += (
                        cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _bw if bias is not None else (lambda g: _bw(g)[:2]))


def avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean, NCHW -> NC."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool_global expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return make_node(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),),
    )


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Training-mode batch normalization over the rows of an N x F input."""
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects N x F, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 rows; variance is undefined")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc**2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def _bw(g):
        gg = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return (gx, gg, gbeta)

    return make_node(out, (x, gamma, beta), _bw)


def roi_pool(feature: Tensor, boxes, output_size=(2, 2), scale: float = 1.0) -> Tensor:
    """Max-pool each box's region of a 1xCxHxW map onto a fixed grid.

    Box corners are scaled into feature coordinates and rounded to the
    nearest cell boundary; the region is split into ``output_size`` bins with
    floor/ceil edges. A bin or region that rounds to nothing is widened to
    the nearest single cell. Memory is R*bins*C*H*W, so keep maps small.
    """
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise ShapeError(f"roi_pool expects a 1xCxHxW map, got {feature.shape}")
    if scale <= 0:
        raise ValueError("roi_pool scale must be positive")
    _, c, fh, fw = feature.shape
    ph, pw = output_size
    boxes = np.asarray(boxes, dtype=DTYPE).reshape(-1, 4)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("roi_pool: every box needs x2 > x1 and y2 > y1")
    r = len(boxes)
    sx, ex = _quantize(boxes[:, 0] * scale, boxes[:, 2] * scale, fw)
    sy, ey = _quantize(boxes[:, 1] * scale, boxes[:, 3] * scale, fh)
    rows_in = _bin_mask(sy, ey, ph, fh)  # R, ph, H
    cols_in = _bin_mask(sx, ex, pw, fw)  # R, pw, W
    cell = rows_in[:, :, None, :, None] & cols_in[:, None, :, None, :]  # R, ph, pw, H, W
    cell = cell.reshape(r, ph, pw, 1, fh * fw)
    flat = feature.data.reshape(1, 1, 1, c, fh * fw)
    vals = np.where(cell, flat, -np.inf)
    argmax = vals.argmax(axis=-1)  # R, ph, pw, C
    note_branch(argmax)
    out = np.take_along_axis(vals, argmax[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    flat_idx = (np.arange(c)[None, None, None, :] * (fh * fw) + argmax).transpose(0, 3, 1, 2)

    def _bw(g):
        gf = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=c * fh * fw)
        return (gf.reshape(1, c, fh, fw),)

    return make_node(out, (feature,), _bw)


def _quantize(lo: np.ndarray, hi: np.ndarray, size: int):
    s = np.floor(lo + 0.5).astype(np.intp)
    e = np.floor(hi + 0.5).astype(np.intp)
    s = np.clip(s, 0, size - 1)
    e = np.minimum(np.maximum(e, s + 1), size)
    return s, e


def _bin_mask(start: np.ndarray, end: np.ndarray, n: int, size: int) -> np.ndarray:
    length = (end - start)[:, None]
    i = np.arange(n)[None, :]
    bs = start[:, None] + (i * length) // n
    be = start[:, None] - ((-(i + 1) * length) // n)
    bs = np.minimum(bs, size - 1)
    be = np.minimum(np.maximum(be, bs + 1), size)
    pos = np.arange(size)[None, None, :]
    return (pos >= bs[:, :, None]) & (pos < be[:, :, None])


# --- losses -----------------------------------------------------------------

def _reduce(t: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return mean(t)
    if reduction == "sum":
        return sum(t)
    if reduction == "none":
        return t
    raise ValueError(f"unknown reduction {reduction!r}")


def binary_ce(p, d, reduction: str = "mean") -> Tensor:
    """Cross-entropy ``-d log p - (1-d) log(1-p)`` with p clamped to [eps, 1-eps].

    ``d`` may be a scalar domain label or an array broadcastable to ``p``.
    Clamped entries pass no gradient.
    """
    p = as_tensor(p)
    d = np.asarray(d, dtype=DTYPE)
    pc = np.clip(p.data, EPS_CLAMP, 1.0 - EPS_CLAMP)
    clamped = pc != p.data
    note_branch(clamped)
    if clamped.any():
        logger.debug("binary_ce clamped %d probabilities", int(clamped.sum()))
    out = -d * np.log(pc) - (1.0 - d) * np.log(1.0 - pc)
    out = np.broadcast_to(out, np.broadcast_shapes(p.shape, d.shape)).copy()

    def _bw(g):
        gp = g * (-d / pc + (1.0 - d) / (1.0 - pc))
        gp = np.where(clamped, 0.0, gp)
        return (_unbroadcast(gp, p.shape),)

    return _reduce(make_node(out, (p,), _bw), reduction)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the rows of an N x K logit matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_ce: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_ce: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = (logsum - z[rows, labels]).mean()

    def _bw(g):
        prob = np.exp(z - logsum[:, None])
        prob[rows, labels] -= 1.0
        return (g * prob / n,)

    return make_node(np.asarray(out), (logits,), _bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Smooth-L1 with transition point ``beta``, summed over coordinates
    and averaged over rows (a 0-d or 1-d input counts as one row)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    ad = np.abs(diff)
    small = ad < beta
    note_branch(small)
    vals = np.where(small, 0.5 * diff**2 / beta, ad - 0.5 * beta)
    rows = pred.shape[0] if pred.ndim >= 2 else 1
    if rows == 0:
        return Tensor(0.0)
    out = vals.sum() / rows
    return make_node(
        np.asarray(out),
        (pred,),
        lambda g: (g * np.where(small, diff / beta, np.sign(diff)) / rows,),
    )
