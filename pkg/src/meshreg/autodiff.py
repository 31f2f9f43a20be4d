"""Minimal reverse-mode tape over numpy arrays.

Covers exactly the ops the registration model needs: 3x3 convolution,
2x2 average pooling, nearest upsampling, channel concat, matmul, graph
propagation, bilinear map sampling, relu, affine reshaping, and the
three scalar losses. Dtype is preserved end to end so the same graph
runs in float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

# When set (see capture_kinks), forward passes log the sign pattern of
# every piecewise-linear switch (relu masks, absolute-value signs), so
# finite-difference probes can tell whether they crossed a kink.
_kink_log: list | None = None


@contextmanager
def capture_kinks():
    global _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = None


def _log_kinks(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern.tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad):
        if self.grad is None:
            # copy: callers may hand the same buffer to several parents
            self.grad = np.array(grad)
        else:
            self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() starts from a scalar")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


def _maybe(parent: Tensor, grad):
    if parent.requires_grad:
        parent._accumulate(grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _maybe(a, _unbroadcast(g, a.data.shape))
        _maybe(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        _maybe(a, g @ b.data.T)
        _maybe(b, a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    _log_kinks(mask)
    out_data = t.data * mask

    def backward(g):
        _maybe(t, g * mask)

    return Tensor(out_data, parents=(t,), backward=backward)


def affine(t: Tensor, scale, offset=None) -> Tensor:
    """Elementwise t * scale (+ offset) with constant scale/offset."""
    scale = np.asarray(scale, dtype=t.data.dtype)
    out_data = t.data * scale
    if offset is not None:
        out_data = out_data + np.asarray(offset, dtype=t.data.dtype)

    def backward(g):
        _maybe(t, g * scale)

    return Tensor(out_data, parents=(t,), backward=backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes[:-1])

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _maybe(p, piece)

    return Tensor(out_data, parents=tuple(parts), backward=backward)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding 3x3 convolution on (C, H, W)."""
    cin, h, wd = x.data.shape
    xp = np.zeros((cin, h + 2, wd + 2), dtype=x.data.dtype)
    xp[:, 1:-1, 1:-1] = x.data
    out_data = kernels.conv3x3_forward(xp, w.data, b.data)

    def backward(g):
        gxp, gw, gb = kernels.conv3x3_backward(xp, w.data, np.ascontiguousarray(g))
        _maybe(x, gxp[:, 1:-1, 1:-1])
        _maybe(w, gw)
        _maybe(b, gb)

    return Tensor(out_data, parents=(x, w, b), backward=backward)


def avgpool2(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    out_data = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        _maybe(x, up * x.data.dtype.type(0.25))

    return Tensor(out_data, parents=(x,), backward=backward)


def upsample2(x: Tensor) -> Tensor:
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        c, h2, w2 = g.shape
        pooled = g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))
        _maybe(x, pooled)

    return Tensor(out_data, parents=(x,), backward=backward)


def propagate(apply_fn, x: Tensor) -> Tensor:
    """Symmetric graph propagation: backward reuses the same operator."""
    out_data = apply_fn(np.ascontiguousarray(x.data))

    def backward(g):
        _maybe(x, apply_fn(np.ascontiguousarray(g)))

    return Tensor(out_data, parents=(x,), backward=backward)


def bilinear_sample(map_chw: Tensor, ys: np.ndarray, xs: np.ndarray, ws: np.ndarray) -> Tensor:
    """Sample (C, H, W) at fixed points given precomputed bilinear taps
    (from projection.bilinear_weights). Returns (n, C); the gradient
    scatters the same weights back into the map."""
    c = map_chw.data.shape[0]
    taps = map_chw.data[:, ys, xs]                # (C, n, 4)
    w = ws.astype(map_chw.data.dtype)
    out_data = np.einsum("cnk,nk->nc", taps, w)

    def backward(g):
        gmap = np.zeros_like(map_chw.data)
        contrib = g.T[:, :, None] * w[None, :, :]  # (C, n, 4)
        for ch in range(c):
            np.add.at(gmap[ch], (ys, xs), contrib[ch])
        _maybe(map_chw, gmap)

    return Tensor(out_data, parents=(map_chw,), backward=backward)


def mse_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    """(1/n) sum of squared row offsets (vertex position loss)."""
    t = np.asarray(target, dtype=pred.data.dtype)
    n = len(t)
    diff = pred.data - t
    out_data = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def backward(g):
        _maybe(pred, (2.0 / n) * diff * g)

    return Tensor(out_data, parents=(pred,), backward=backward)


def laplacian_mse(lap_apply, lap_t_apply, pred: Tensor, target: np.ndarray) -> Tensor:
    """Smoothness loss via operator handles for L and L^T."""
    t = np.asarray(target, dtype=pred.data.dtype)
    n = len(t)
    diff = lap_apply(np.ascontiguousarray(pred.data - t))
    out_data = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def backward(g):
        _maybe(pred, (2.0 / n) * lap_t_apply(np.ascontiguousarray(diff)) * g)

    return Tensor(out_data, parents=(pred,), backward=backward)


def masked_mae(pred_chw: Tensor, target_chw: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over mask-covered pixels, all channels."""
    t = np.asarray(target_chw, dtype=pred_chw.data.dtype)
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum()) * pred_chw.data.shape[0]
    if count == 0:
        return Tensor(np.asarray(0.0, dtype=pred_chw.data.dtype), parents=(pred_chw,),
                      backward=lambda g: None)
    diff = (pred_chw.data - t) * m[None, :, :]
    _log_kinks(diff > 0)
    out_data = np.asarray(np.abs(diff).sum() / count, dtype=pred_chw.data.dtype)

    def backward(g):
        _maybe(pred_chw, np.sign(diff) / count * g)

    return Tensor(out_data, parents=(pred_chw,), backward=backward)


def weighted_sum(terms: list[Tensor], weights: list[float]) -> Tensor:
    out_data = np.asarray(sum(float(w) * t.data for t, w in zip(terms, weights)),
                          dtype=terms[0].data.dtype)

    def backward(g):
        for t, w in zip(terms, weights):
            _maybe(t, np.asarray(g * w, dtype=t.data.dtype))

    return Tensor(out_data, parents=tuple(terms), backward=backward)
