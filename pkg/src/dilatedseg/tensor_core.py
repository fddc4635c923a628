"""Differentiable primitives on dense ``(batch, channels, rows, cols)`` arrays.

Tensors are plain numpy arrays in C order, so element ``(b, c, r, k)`` sits at
offset ``((b*C + c)*H + r)*W + k``. Every primitive has an explicit backward
rule; the layer sequence in :mod:`dilatedseg.network` chains them by hand.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import LabelError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


@dataclass
class ConvKernel:
    """Weights ``(out, in, kh, kw)``, optional bias ``(out,)`` and dilation."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-D, got shape {self.weights.shape}")
        if int(self.dilation) < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )

    @property
    def footprint(self):
        kh, kw = self.weights.shape[2:]
        d = self.dilation
        return (kh - 1) * d + 1, (kw - 1) * d + 1


def conv_output_shape(input_shape, kernel: ConvKernel):
    B, C, H, W = input_shape
    O, Ci, kh, kw = kernel.weights.shape
    if C != Ci:
        raise ShapeError(f"input has {C} channels but kernel expects {Ci}")
    fh, fw = kernel.footprint
    if H < fh or W < fw:
        raise ShapeError(
            f"input extent {H}x{W} smaller than the {fh}x{fw} kernel footprint"
        )
    return B, O, H - fh + 1, W - fw + 1


def _tap_offsets(kh, kw, d, W):
    return [(i, j, i * d * W + j * d) for i in range(kh) for j in range(kw)]


# Inputs with at most this many channels are gathered into one column matrix
# and multiplied once; wider inputs accumulate one matmul per tap instead.
IM2COL_MAX_CHANNELS = 4

# The convolution works on rows flattened to length H*W. For tap (i, j) the
# input window of every output pixel is a constant flat offset away, so each
# tap is one BLAS matmul on a strided slice. Output positions whose column
# falls in the last (kw-1)*d columns of a row are junk and are cropped.

def conv2d(x, kernel: ConvKernel):
    """Valid dilated convolution (cross-correlation) with optional bias."""
    B, O, Ho, Wo = conv_output_shape(x.shape, kernel)
    _, C, H, W = x.shape
    w = kernel.weights
    kh, kw = w.shape[2:]
    dtype = np.result_type(x.dtype, w.dtype)
    if kh == 1 and kw == 1:
        out = np.matmul(np.ascontiguousarray(w[:, :, 0, 0], dtype=dtype),
                        x.reshape(B, C, H * W).astype(dtype, copy=False))
        out = out.reshape(B, O, H, W)
    else:
        xf = np.ascontiguousarray(x, dtype=dtype).reshape(B, C, H * W)
        L = (Ho - 1) * W + Wo
        full = np.zeros((B, O, Ho * W), dtype=dtype)
        taps = _tap_offsets(kh, kw, kernel.dilation, W)
        if C <= IM2COL_MAX_CHANNELS:
            cols = np.empty((B, len(taps) * C, L), dtype=dtype)
            for t, (i, j, off) in enumerate(taps):
                cols[:, t * C:(t + 1) * C] = xf[:, :, off:off + L]
            w2 = np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(O, -1), dtype=dtype)
            np.matmul(w2, cols, out=full[:, :, :L])
        else:
            acc = full[:, :, :L]
            tmp = np.empty((B, O, L), dtype=dtype)
            for i, j, off in taps:
                np.matmul(np.ascontiguousarray(w[:, :, i, j], dtype=dtype), xf[:, :, off:off + L], out=tmp)
                acc += tmp
        out = full.reshape(B, O, Ho, W)[:, :, :, :Wo]
        out = np.ascontiguousarray(out)
    if kernel.bias is not None:
        out += kernel.bias.astype(dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(grad_out, x, kernel: ConvKernel, input_grad=True):
    """Adjoint of :func:`conv2d`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_bias`` is None
    when the kernel has no bias and ``grad_input`` is None when
    ``input_grad`` is false.
    """
    expected = conv_output_shape(x.shape, kernel)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    B, O, Ho, Wo = expected
    _, C, H, W = x.shape
    w = kernel.weights
    kh, kw = w.shape[2:]
    dtype = np.result_type(x.dtype, w.dtype, grad_out.dtype)

    grad_b = grad_out.sum(axis=(0, 2, 3)).astype(dtype) if kernel.bias is not None else None
    xf = np.ascontiguousarray(x, dtype=dtype).reshape(B, C, H * W)

    if kh == 1 and kw == 1:
        gof = np.ascontiguousarray(grad_out, dtype=dtype).reshape(B, O, H * W)
        gw = np.matmul(gof, xf.transpose(0, 2, 1)).sum(axis=0)
        if not input_grad:
            return None, gw.reshape(w.shape), grad_b
        gx = np.matmul(np.ascontiguousarray(w[:, :, 0, 0].T, dtype=dtype), gof)
        return gx.reshape(x.shape), gw.reshape(w.shape), grad_b

    L = (Ho - 1) * W + Wo
    full = np.zeros((B, O, Ho * W), dtype=dtype)
    full.reshape(B, O, Ho, W)[:, :, :, :Wo] = grad_out
    gof = full[:, :, :L]
    gof_t = gof.transpose(0, 2, 1)

    gw = np.empty(w.shape, dtype=dtype)
    for i, j, off in _tap_offsets(kh, kw, kernel.dilation, W):
        gw[:, :, i, j] = np.matmul(xf[:, :, off:off + L], gof_t).sum(axis=0).T
    if not input_grad:
        return None, gw, grad_b
    gx = np.zeros((B, C, H * W), dtype=dtype)
    tmp = np.empty((B, C, L), dtype=dtype)
    for i, j, off in _tap_offsets(kh, kw, kernel.dilation, W):
        np.matmul(np.ascontiguousarray(w[:, :, i, j].T, dtype=dtype), gof, out=tmp)
        gx[:, :, off:off + L] += tmp
    return gx.reshape(x.shape), gw, grad_b


def elu(x, alpha=1.0):
    # expm1(0) == 0 exactly, so positive entries pass through unchanged
    y = np.minimum(x, 0)
    np.expm1(y, out=y)
    if alpha != 1.0:
        y *= alpha
    y += np.maximum(x, 0)
    return y


def elu_backward(grad_y, x, y, alpha=1.0):
    return grad_y * np.where(x > 0, 1.0, y + alpha).astype(grad_y.dtype, copy=False)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray


def batchnorm(x, gamma, beta, running_mean, running_var, train=True, eps=BN_EPS):
    """Per-channel normalisation over (batch, rows, cols).

    In train mode batch statistics are used and returned in the cache so the
    caller can fold them into the running averages (see
    :func:`update_running_stats`); in inference mode the running statistics
    are used and the cache is None.
    """
    C = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeError(f"batchnorm {name} has shape {arr.shape}, expected ({C},)")
    bc = (None, slice(None), None, None)
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        y = (x - running_mean[bc]) * (inv * gamma)[bc] + beta[bc]
        return y.astype(x.dtype, copy=False), None
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[bc]) * inv[bc]
    y = xhat * gamma[bc] + beta[bc]
    return y, BatchNormCache(xhat, inv, mean, var)


def batchnorm_backward(grad_y, cache: BatchNormCache, gamma):
    """Returns ``(grad_x, grad_gamma, grad_beta)`` of the train-mode expression."""
    bc = (None, slice(None), None, None)
    xhat = cache.xhat
    n = grad_y.size // grad_y.shape[1]
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    grad_gamma = (grad_y * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_y * gamma[bc]
    grad_x = (cache.inv_std / n)[bc] * (
        n * dxhat - dxhat.sum(axis=(0, 2, 3))[bc] - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[bc]
    )
    return grad_x, grad_gamma, grad_beta


def update_running_stats(running_mean, running_var, cache: BatchNormCache, momentum=BN_MOMENTUM):
    """Exponential moving average; returns new arrays."""
    new_mean = momentum * running_mean + (1.0 - momentum) * cache.batch_mean
    new_var = momentum * running_var + (1.0 - momentum) * cache.batch_var
    return new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)


def dropout(x, rate, rng=None, train=True):
    """Inverted dropout. Returns ``(y, mask)`` with ``y = x * mask``.

    The mask already carries the ``1 / (1 - rate)`` survivor scale, so the
    backward pass is ``grad_y * mask``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def softmax_channels(logits):
    if logits.shape[1] < 2:
        raise ShapeError("softmax needs at least two channels")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, targets, border=0):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    ``targets`` is an integer label map ``(B, H, W)``. Pixels closer than
    ``border`` to the edge of the map are excluded from loss and gradient.
    Returns ``(loss, grad_logits)``.
    """
    B, K, H, W = probs.shape
    if targets.shape != (B, H, W):
        raise ShapeError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    t = np.asarray(targets)
    if t.size and (t.min() < 0 or t.max() >= K):
        raise LabelError(f"labels must lie in [0, {K}), found range [{t.min()}, {t.max()}]")
    if H - 2 * border < 1 or W - 2 * border < 1:
        raise ShapeError(f"border {border} leaves no pixels in a {H}x{W} map")
    sel = (slice(None), slice(border, H - border), slice(border, W - border))
    t = t[sel].astype(np.intp)
    p = probs[:, :, sel[1], sel[2]]
    n = t.size
    picked = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())

    grad = np.zeros_like(probs)
    g = p.copy()
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
    g -= onehot
    g /= n
    grad[:, :, sel[1], sel[2]] = g
    return loss, grad
