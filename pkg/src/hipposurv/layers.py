"""Differentiable layer kernels for 3D feature maps.

Feature maps are stored channel-major with the batch as the second axis:
``x[c, n, i, j, k]`` is channel ``c`` of sample ``n`` at voxel ``(i, j, k)``.
A single-sample tensor is ``x[:, n]``. Keeping channels first lets every
convolution run as one matrix product without transposes.

Forward kernels return their output; training code uses the ``*_forward`` /
``*_backward`` pairs, which carry a cache between the two passes.
Reductions accumulate in float64 whatever the storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _triple(v, name):
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"{name} needs three entries, got {v}")
    return v


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite parameter passed to a layer")


# --------------------------------------------------------------------------- conv


@dataclass
class ConvCache:
    cols: np.ndarray
    input_shape: tuple
    kernels: np.ndarray
    padding: tuple
    stride: tuple
    out_spatial: tuple


def conv_output_dims(spatial, ksize, padding=0, stride=1):
    padding = _triple(padding, "padding")
    stride = _triple(stride, "stride")
    return tuple((s + 2 * p - k) // st + 1 for s, k, p, st in zip(spatial, ksize, padding, stride))


def conv3d_forward(x, kernels, bias, padding=0, stride=1):
    """Zero-padded 3D cross-correlation; returns ``(out, cache)``.

    Parameters
    ----------
    x : ndarray, shape (C, N, X, Y, Z)
    kernels : ndarray, shape (O, C, kx, ky, kz)
    bias : ndarray, shape (O,)
    padding, stride : int or 3-tuple
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects a (C, N, X, Y, Z) input, got ndim {x.ndim}")
    if kernels.ndim != 5 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"kernels {kernels.shape} do not match {x.shape[0]} input channels")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
    if any(p < 0 for p in _triple(padding, "padding")) or any(s < 1 for s in _triple(stride, "stride")):
        raise ShapeError("padding must be >= 0 and stride >= 1")
    _check_finite(kernels, bias)
    padding = _triple(padding, "padding")
    stride = _triple(stride, "stride")
    ksize = kernels.shape[2:]
    out_sp = conv_output_dims(x.shape[2:], ksize, padding, stride)
    if min(out_sp) < 1:
        raise ShapeError(f"conv output would be empty for input {x.shape[2:]} and kernel {ksize}")
    cols = _im2col(x, ksize, padding, stride, out_sp)
    n_out = kernels.shape[0]
    w2 = kernels.reshape(n_out, -1).astype(x.dtype, copy=False)
    out = w2 @ cols
    out += bias.astype(x.dtype, copy=False)[:, None]
    out = out.reshape((n_out, x.shape[1]) + out_sp)
    return out, ConvCache(cols, x.shape, kernels, padding, stride, out_sp)


def conv3d_backward(dout, cache: ConvCache, need_input_grad=True):
    """Gradients of a conv3d; returns ``(dx, dkernels, dbias)``. ``dx`` is None if not requested."""
    n_out = cache.kernels.shape[0]
    expected = (n_out, cache.input_shape[1]) + cache.out_spatial
    if dout.shape != expected:
        raise ShapeError(f"upstream gradient {dout.shape} does not match conv output {expected}")
    d2 = dout.reshape(n_out, -1)
    dw = (d2 @ cache.cols.T).reshape(cache.kernels.shape)
    db = d2.sum(axis=1, dtype=np.float64).astype(dout.dtype)
    dx = None
    if need_input_grad:
        dcols = cache.kernels.reshape(n_out, -1).astype(dout.dtype, copy=False).T @ d2
        dx = _col2im(dcols, cache.input_shape, cache.kernels.shape[2:], cache.padding, cache.stride, cache.out_spatial)
    return dx, dw, db


def conv3d(x, kernels, bias, padding=0, stride=1):
    return conv3d_forward(x, kernels, bias, padding, stride)[0]


def conv3d_grads(x, kernels, upstream, padding=0, stride=1):
    """Stateless backward: recomputes the forward cache. Returns ``(dx, dkernels, dbias)``."""
    bias = np.zeros(kernels.shape[0], dtype=kernels.dtype)
    _, cache = conv3d_forward(x, kernels, bias, padding, stride)
    return conv3d_backward(upstream, cache)


def _window_slices(ksize, padding, stride, out_sp):
    for dx in range(ksize[0]):
        for dy in range(ksize[1]):
            for dz in range(ksize[2]):
                yield (
                    slice(dx, dx + stride[0] * (out_sp[0] - 1) + 1, stride[0]),
                    slice(dy, dy + stride[1] * (out_sp[1] - 1) + 1, stride[1]),
                    slice(dz, dz + stride[2] * (out_sp[2] - 1) + 1, stride[2]),
                )


def _pad(x, padding):
    if not any(padding):
        return x
    c, n, X, Y, Z = x.shape
    px, py, pz = padding
    xp = np.zeros((c, n, X + 2 * px, Y + 2 * py, Z + 2 * pz), dtype=x.dtype)
    xp[:, :, px : px + X, py : py + Y, pz : pz + Z] = x
    return xp


def _im2col(x, ksize, padding, stride, out_sp):
    c, n = x.shape[:2]
    xp = _pad(x, padding)
    kvol = ksize[0] * ksize[1] * ksize[2]
    cols = np.empty((c, kvol, n) + tuple(out_sp), dtype=x.dtype)
    for k, (sx, sy, sz) in enumerate(_window_slices(ksize, padding, stride, out_sp)):
        cols[:, k] = xp[:, :, sx, sy, sz]
    return cols.reshape(c * kvol, -1)


def _col2im(dcols, input_shape, ksize, padding, stride, out_sp):
    c, n, X, Y, Z = input_shape
    kvol = ksize[0] * ksize[1] * ksize[2]
    dcols = dcols.reshape((c, kvol, n) + tuple(out_sp))
    px, py, pz = padding
    dxp = np.zeros((c, n, X + 2 * px, Y + 2 * py, Z + 2 * pz), dtype=dcols.dtype)
    for k, (sx, sy, sz) in enumerate(_window_slices(ksize, padding, stride, out_sp)):
        dxp[:, :, sx, sy, sz] += dcols[:, k]
    return dxp[:, :, px : px + X, py : py + Y, pz : pz + Z]


# --------------------------------------------------------------------------- pooling


def maxpool3d(x):
    """2x2x2 max pooling with stride 2; odd trailing voxels are dropped.

    Returns ``(out, argmax)`` where ``argmax`` holds the winning position in
    each window, numbered in x-fastest scan order ``(dz*2 + dy)*2 + dx``.
    Ties go to the first position in that order.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects a (C, N, X, Y, Z) input, got ndim {x.ndim}")
    c, n, X, Y, Z = x.shape
    if min(X, Y, Z) < 2:
        raise ShapeError(f"maxpool3d needs every spatial dim >= 2, got {(X, Y, Z)}")
    X2, Y2, Z2 = X // 2, Y // 2, Z // 2
    win = x[:, :, : 2 * X2, : 2 * Y2, : 2 * Z2].reshape(c, n, X2, 2, Y2, 2, Z2, 2)
    # -> (..., dz, dy, dx) so the flattened window index is x-fastest
    win = win.transpose(0, 1, 2, 4, 6, 7, 5, 3).reshape(c, n, X2, Y2, Z2, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(dout, argmax, input_shape):
    c, n, X, Y, Z = input_shape
    X2, Y2, Z2 = X // 2, Y // 2, Z // 2
    if dout.shape != (c, n, X2, Y2, Z2) or argmax.shape != dout.shape:
        raise ShapeError(f"pool gradient {dout.shape} does not match input {input_shape}")
    win = np.zeros((c, n, X2, Y2, Z2, 8), dtype=dout.dtype)
    np.put_along_axis(win, argmax[..., None], dout[..., None], axis=-1)
    win = win.reshape(c, n, X2, Y2, Z2, 2, 2, 2).transpose(0, 1, 2, 7, 3, 6, 4, 5)
    dx = np.zeros(input_shape, dtype=dout.dtype)
    dx[:, :, : 2 * X2, : 2 * Y2, : 2 * Z2] = win.reshape(c, n, 2 * X2, 2 * Y2, 2 * Z2)
    return dx


# --------------------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated in place during training."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def _bcast(v, ndim):
    return v.reshape((-1,) + (1,) * (ndim - 1))


def batch_norm_forward(x, gamma, beta, state: BatchNormState, mode="train"):
    """Per-channel batch normalization over (batch x spatial) positions.

    In train mode the batch statistics normalize the input and the running
    statistics in ``state`` are updated in place
    (``running <- momentum*running + (1-momentum)*batch``, unbiased variance).
    Infer mode uses the running statistics only.
    """
    if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ShapeError("gamma/beta must have one entry per channel")
    if not state.eps > 0:
        raise PreconditionError("batch norm epsilon must be positive")
    _check_finite(gamma, beta)
    if mode == "train":
        if x.shape[1] < 2:
            raise PreconditionError("train-mode batch norm needs a batch of at least 2")
        flat = x.reshape(x.shape[0], -1)
        m = flat.shape[1]
        mean = flat.mean(axis=1, dtype=np.float64)
        centered = flat - mean.astype(x.dtype)[:, None]
        var = np.einsum("ij,ij->i", centered, centered, dtype=np.float64) / m
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * var * m / (m - 1)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (centered * inv_std.astype(x.dtype)[:, None]).reshape(x.shape)
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        xhat = (x - _bcast(state.running_mean.astype(x.dtype), x.ndim)) * _bcast(inv_std.astype(x.dtype), x.ndim)
    else:
        raise PreconditionError(f"unknown mode {mode!r}")
    out = xhat * _bcast(gamma.astype(x.dtype), x.ndim) + _bcast(beta.astype(x.dtype), x.ndim)
    return out, BNCache(xhat, inv_std, gamma)


def batch_norm_backward(dout, cache: BNCache):
    """Train-mode gradients; returns ``(dx, dgamma, dbeta)``."""
    c = dout.shape[0]
    d2 = dout.reshape(c, -1)
    xh = cache.xhat.reshape(c, -1)
    m = d2.shape[1]
    dbeta = d2.sum(axis=1, dtype=np.float64)
    dgamma = np.einsum("ij,ij->i", d2, xh, dtype=np.float64)
    scale = (cache.gamma * cache.inv_std / m).astype(dout.dtype)
    dx = scale[:, None] * (m * d2 - dbeta.astype(dout.dtype)[:, None] - xh * dgamma.astype(dout.dtype)[:, None])
    return dx.reshape(dout.shape), dgamma.astype(dout.dtype), dbeta.astype(dout.dtype)


def batch_norm(x, gamma, beta, state: BatchNormState, mode="train"):
    return batch_norm_forward(x, gamma, beta, state, mode)[0]


# --------------------------------------------------------------------------- pointwise & head


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, out):
    """Gradient of ReLU given its *output*."""
    return dout * (out > 0)


def gap(x):
    """Global average pool: ``(C, N, X, Y, Z) -> (N, C)``."""
    c, n = x.shape[:2]
    return x.reshape(c, n, -1).mean(axis=2, dtype=np.float64).astype(x.dtype).T


def gap_backward(dout, input_shape):
    c, n = input_shape[:2]
    vox = int(np.prod(input_shape[2:]))
    g = (dout.T / vox).astype(dout.dtype)
    return np.broadcast_to(g.reshape(c, n, 1, 1, 1), input_shape).copy()


def fully_connected(x, weight, bias):
    """``x @ weight.T + bias`` for a batch of row vectors; ``weight`` is (out, in)."""
    x = np.asarray(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    _check_finite(weight, bias)
    return x @ weight.T.astype(x.dtype, copy=False) + bias.astype(x.dtype, copy=False)


def fully_connected_backward(dout, x, weight):
    dx = dout @ weight.astype(dout.dtype, copy=False)
    dw = dout.T @ x
    db = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
    return dx, dw, db


def dropout(x, ratio, mode, rng=None):
    """Inverted dropout; returns ``(out, mask)``. ``mask`` is None in infer mode."""
    if not 0 <= ratio < 1:
        raise PreconditionError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if mode == "infer" or ratio == 0:
        return x, None
    if mode != "train":
        raise PreconditionError(f"unknown mode {mode!r}")
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) / x.dtype.type(1 - ratio)
    return x * mask, mask


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch.

    ``logits`` is (N, K) or a single length-K vector; ``labels`` class indices.
    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / N``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = np.atleast_2d(logits).astype(np.float64)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = z.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise PreconditionError(f"labels {labels.tolist()} out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grad = grad.astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return float(loss), (grad[0] if single else grad)
