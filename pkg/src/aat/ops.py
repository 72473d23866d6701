"""Differentiable primitives.

Every function takes :class:`~aat.tensor.Tensor` inputs, returns a new
tensor and, when a tape is active and some input requires a gradient,
records a node whose backward closure maps the output gradient to input
gradients. Images and feature maps use NHWC layout; convolution kernels are
stored as ``(kh, kw, in_channels, out_channels)``.

Conventions: ``relu'(0) = 0``; ``sign(0) = 0`` (see :func:`aat.aat_core.fgsm_attack`).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from aat.tensor import Node, NumericError, ShapeError, Tensor, active_tape


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericError(f"{op}: non-finite value in input of shape {t.shape}")


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the op's output and record it if anything needs a gradient.

    ``backward(g, need)`` receives the output gradient and a tuple of flags,
    one per input, and returns one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    need = tuple(t.requires_grad for t in inputs)
    if not any(need):
        return out
    out.requires_grad = True
    parents = tuple(t for t in inputs if t.requires_grad)

    def bw(g: np.ndarray):
        grads = backward(g, need)
        return tuple(gi for gi, n in zip(grads, need) if n)

    tape.record(Node(op, parents, out, bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    _check_finite("add", a, b)

    def backward(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _emit("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a, b)

    def backward(g, need):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return _emit("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scale", a)
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g, need: (g * c,))


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g, need: (g * mask,))


def grad_reverse(x: Tensor, strength: float) -> Tensor:
    """Identity on the forward pass; multiplies the gradient by ``-strength``."""
    _check_finite("grad_reverse", x)
    c = x.dtype.type(-strength)
    return _emit("grad_reverse", x.data.copy(), (x,), lambda g, need: (g * c,))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", a, b)

    def backward(g, need):
        return (g @ b.data.T if need[0] else None, a.data.T @ g if need[1] else None)

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    inputs = (x, w) if b is None else (x, w, b)
    _check_finite("linear", *inputs)
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g, need):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if need[0] else None
        gw = x2.T @ g2 if need[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if need[2] else None)

    return _emit("linear", out, inputs, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NHWC batch with a ``(kh, kw, C, O)`` kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    inputs = (x, w) if b is None else (x, w, b)
    _check_finite("conv2d", *inputs)
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate(
        [xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] for i, j in offsets],
        axis=-1,
    ).reshape(-1, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, o)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o)

    def backward(g, need):
        g2 = g.reshape(-1, o)
        gx = None
        if need[0]:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for k, (i, j) in enumerate(offsets):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, k, :]
            gx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
        gw = (cols.T @ g2).reshape(w.shape) if need[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if need[2] else None)

    return _emit("conv2d", out, inputs, backward)


# -- shape manipulation ------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g, need: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    _check_finite("concat", *tensors)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g, need):
        parts = np.split(g, sizes, axis=ax)
        return tuple(p if n else None for p, n in zip(parts, need))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def take(x: Tensor, index) -> Tensor:
    """Select along the leading axis with a slice or integer index array."""
    out = x.data[index]

    def backward(g, need):
        gx = np.zeros_like(x.data)
        if isinstance(index, slice):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("take", out, (x,), backward)


# -- reductions --------------------------------------------------------------


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g, need):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis), 1.0 / n)


# -- losses ------------------------------------------------------------------


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy of integer ``targets`` under ``softmax(logits)``.

    ``logits`` is ``(M, K)``. With ``reduction="mean"`` the result is the
    weighted average ``sum(w * l) / sum(w)``; ``"sum"`` returns ``sum(w * l)``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    _check_finite("softmax_cross_entropy", logits)
    m = logits.shape[0]
    w = np.ones(m, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    if w.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: weights {w.shape} vs logits {logits.shape}")
    rows = np.arange(m)
    logp = log_softmax_np(logits.data)
    per_row = -logp[rows, targets]
    if reduction == "mean":
        norm = w.sum()
        norm = norm if norm > 0 else logits.dtype.type(1)
    elif reduction == "sum":
        norm = logits.dtype.type(1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = np.asarray((w * per_row).sum() / norm, dtype=logits.dtype)

    def backward(g, need):
        d = np.exp(logp)
        d[rows, targets] -= 1
        return (d * (w / norm)[:, None] * g,)

    return _emit("softmax_cross_entropy", loss, (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed from raw logits."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    _check_finite("binary_cross_entropy", logits)
    z = logits.data
    n = max(z.size, 1)
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.sum() / n, dtype=logits.dtype)

    def backward(g, need):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (((sig - targets) / n * g).astype(logits.dtype),)

    return _emit("binary_cross_entropy", loss, (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 distance; ``weights`` scales each leading-axis row."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {target.shape} vs prediction {pred.shape}")
    _check_finite("smooth_l1", pred)
    diff = pred.data - target
    ad = np.abs(diff)
    per = np.where(ad < beta, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    w = np.ones(pred.shape[:1], dtype=pred.dtype) if weights is None else np.asarray(weights, dtype=pred.dtype)
    wb = w.reshape((-1,) + (1,) * (pred.ndim - 1))
    loss = np.asarray((per * wb).sum(), dtype=pred.dtype)

    def backward(g, need):
        d = np.where(ad < beta, diff / beta, np.sign(diff))
        return ((d * wb * g).astype(pred.dtype),)

    return _emit("smooth_l1", loss, (pred,), backward)
