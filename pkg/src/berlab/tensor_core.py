"""Dense tensor primitives with hand-written backward passes.

Activations are NCHW float32 arrays, convolution filters are
(Cout, Cin, Kh, Kw). Convolution follows the cross-correlation convention
(no kernel flip), the same as every mainstream deep learning framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, kh: int, kw: int, stride=1, padding=0) -> np.ndarray:
    """Patch matrix of shape (N*Ho*Wo, C*kh*kw), rows in (n, i, j) order."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2:4]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


@numba.njit(cache=True)
def _col2im_kernel(cols, dx, kh, kw, sh, sw, ho, wo):
    n, c = dx.shape[:2]
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                r = (b * ho + i) * wo + j
                k = 0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            dx[b, ch, i * sh + u, j * sw + v] += cols[r, k]
                            k += 1


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride=1, padding=0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    dx = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    _col2im_kernel(np.ascontiguousarray(cols), dx, kh, kw, sh, sw, ho, wo)
    if ph or pw:
        dx = np.ascontiguousarray(dx[:, :, ph:ph + h, pw:pw + w])
    return dx


def _check_conv(x: np.ndarray, filters: np.ndarray, stride, padding) -> None:
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and filters, got input {x.shape} and filters {filters.shape}")
    if x.shape[1] != filters.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride!r} or padding {padding!r}")
    if x.shape[2] + 2 * ph < filters.shape[2] or x.shape[3] + 2 * pw < filters.shape[3]:
        raise ShapeError(f"conv2d kernel larger than padded input: input {x.shape} vs filters {filters.shape}")


def conv2d(x: np.ndarray, filters: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """2-d cross-correlation, ``out[n,o,i,j] = sum_{c,u,v} x[n,c,i*s+u,j*s+v] * f[o,c,u,v]``."""
    out, _ = conv2d_forward(x, filters, stride, padding)
    return out


def conv2d_forward(x, filters, stride=1, padding=0):
    """Forward pass returning ``(out, cache)`` for :func:`conv2d_backward`."""
    _check_conv(x, filters, stride, padding)
    n = x.shape[0]
    cout, _, kh, kw = filters.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = conv_output_size(x.shape[2], kh, sh, ph)
    wo = conv_output_size(x.shape[3], kw, sw, pw)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ filters.reshape(cout, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, filters, stride, padding)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Return ``(dx, dfilters)``; ``dx`` is None when ``need_dx`` is false."""
    cols, x_shape, filters, stride, padding = cache
    cout, _, kh, kw = filters.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dfilters = (dmat.T @ cols).reshape(filters.shape)
    dx = None
    if need_dx:
        dcols = dmat @ filters.reshape(cout, -1)
        dx = col2im(dcols, x_shape, kh, kw, stride, padding)
    return dx, dfilters


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_divisible(x: np.ndarray, kh: int, kw: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects 4-d input, got {x.shape}")
    if x.shape[2] % kh or x.shape[3] % kw:
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by pooling window {(kh, kw)}")


def _blocks(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // kh, w // kw, kh * kw)


def _unblocks(b: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h2, w2, _ = b.shape
    return b.reshape(n, c, h2, w2, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * kh, w2 * kw)


@numba.njit(cache=True)
def _maxpool_kernel(x, kh, kw, out, idx):
    n, c, ho, wo = out.shape
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, i * kh, j * kw]
                    arg = 0
                    for u in range(kh):
                        for v in range(kw):
                            val = x[b, ch, i * kh + u, j * kw + v]
                            if val > best:
                                best = val
                                arg = u * kw + v
                    out[b, ch, i, j] = best
                    idx[b, ch, i, j] = arg


@numba.njit(cache=True)
def _maxpool_backward_kernel(dout, idx, kh, kw, dx):
    n, c, ho, wo = dout.shape
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = idx[b, ch, i, j]
                    dx[b, ch, i * kh + a // kw, j * kw + a % kw] = dout[b, ch, i, j]


def maxpool2_forward(x: np.ndarray, window=2):
    """Non-overlapping max pooling. Ties route to the first maximum in row-major order."""
    kh, kw = _pair(window)
    _check_divisible(x, kh, kw)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // kh, w // kw), x.dtype)
    idx = np.empty(out.shape, np.int32)
    _maxpool_kernel(np.ascontiguousarray(x), kh, kw, out, idx)
    return out, (idx, x.shape, kh, kw)


def maxpool2(x: np.ndarray) -> np.ndarray:
    return maxpool2_forward(x, 2)[0]


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, x_shape, kh, kw = cache
    dx = np.zeros(x_shape, dout.dtype)
    _maxpool_backward_kernel(np.ascontiguousarray(dout), idx, kh, kw, dx)
    return dx


def avgpool_forward(x: np.ndarray, window=2):
    kh, kw = _pair(window)
    _check_divisible(x, kh, kw)
    out = _blocks(x, kh, kw).mean(axis=-1, dtype=x.dtype)
    return out, (x.shape, kh, kw)


def avgpool(x: np.ndarray, window=2) -> np.ndarray:
    return avgpool_forward(x, window)[0]


def avgpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, kh, kw = cache
    share = dout / (kh * kw)
    b = np.broadcast_to(share[..., None], share.shape + (kh * kw,))
    return _unblocks(np.ascontiguousarray(b), kh, kw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(num_features, DTYPE),
            beta=np.zeros(num_features, DTYPE),
            running_mean=np.zeros(num_features, DTYPE),
            running_var=np.ones(num_features, DTYPE),
            momentum=momentum,
            eps=eps,
        )


def _as3d(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1)
    raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


@numba.njit(cache=True)
def _bn_stats(x):
    n, c, l = x.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    for b in range(n):
        for ch in range(c):
            acc = 0.0
            for k in range(l):
                acc += x[b, ch, k]
            mean[ch] += acc
    mean /= n * l
    for b in range(n):
        for ch in range(c):
            acc = 0.0
            m = mean[ch]
            for k in range(l):
                d = x[b, ch, k] - m
                acc += d * d
            var[ch] += acc
    var /= n * l
    return mean, var


@numba.njit(cache=True)
def _bn_apply(x, mean, inv_std, gamma, beta, out, xhat):
    n, c, l = x.shape
    for b in range(n):
        for ch in range(c):
            m = mean[ch]
            s = inv_std[ch]
            g = gamma[ch]
            t = beta[ch]
            for k in range(l):
                h = (x[b, ch, k] - m) * s
                xhat[b, ch, k] = h
                out[b, ch, k] = g * h + t


@numba.njit(cache=True)
def _bn_backward(dout, xhat, gamma, inv_std, training, dx):
    n, c, l = dout.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for b in range(n):
        for ch in range(c):
            sg = 0.0
            sb = 0.0
            for k in range(l):
                d = dout[b, ch, k]
                sb += d
                sg += d * xhat[b, ch, k]
            dgamma[ch] += sg
            dbeta[ch] += sb
    count = n * l
    for b in range(n):
        for ch in range(c):
            s = gamma[ch] * inv_std[ch]
            if training:
                mb = dbeta[ch] / count
                mg = dgamma[ch] / count
                for k in range(l):
                    dx[b, ch, k] = s * (dout[b, ch, k] - mb - xhat[b, ch, k] * mg)
            else:
                for k in range(l):
                    dx[b, ch, k] = s * dout[b, ch, k]
    return dgamma, dbeta


def batchnorm_forward(x: np.ndarray, state: BatchNormState, training: bool):
    """Normalize per channel (4-d) or per feature (2-d).

    In training mode the batch statistics are used and the running
    statistics are updated in place; inference mode reads the running ones.
    """
    x3 = np.ascontiguousarray(_as3d(x))
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm training mode needs batch size >= 2, got {x.shape[0]}")
        count = x3.shape[0] * x3.shape[2]
        mean, var = _bn_stats(x3)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (count / max(count - 1, 1))
    else:
        mean, var = state.running_mean.astype(np.float64), state.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    out = np.empty_like(x3)
    xhat = np.empty_like(x3)
    _bn_apply(x3, mean.astype(x.dtype), inv_std.astype(x.dtype), state.gamma.astype(x.dtype),
              state.beta.astype(x.dtype), out, xhat)
    return out.reshape(x.shape), (xhat, inv_std.astype(x.dtype), state.gamma.copy(), training, x.shape)


def batchnorm(x: np.ndarray, state: BatchNormState, training: bool = True) -> np.ndarray:
    return batchnorm_forward(x, state, training)[0]


def batchnorm_backward(dout: np.ndarray, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training, shape = cache
    d3 = np.ascontiguousarray(_as3d(dout))
    dx = np.empty_like(d3)
    dgamma, dbeta = _bn_backward(d3, xhat, gamma.astype(d3.dtype), inv_std, training, dx)
    return dx.reshape(shape), dgamma.astype(dout.dtype), dbeta.astype(dout.dtype)


# ---------------------------------------------------------------------------
# dense, relu, loss
# ---------------------------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weights.T + bias`` with weights laid out (out_features, in_features)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense shape mismatch: input {x.shape} vs weights {weights.shape}")
    y = x @ weights.T
    if bias is not None:
        y += bias
    return y


def dense_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(dx, dweights, dbias)``."""
    return dout @ weights, dout.T @ x, dout.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update applied in place; returns ``params``.

    Parameters absent from ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** t
    corr2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr / corr1) * m / (np.sqrt(v / corr2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params
