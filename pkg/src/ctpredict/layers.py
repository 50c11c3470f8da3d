"""Primitive differentiable ops on 5D tensors (batch, channel, x, y, z).

Every op is a pair ``*_forward(...) -> (out, cache)`` / ``*_backward(dout,
cache) -> grads`` with no global state. Ops preserve the input dtype:
float32 for training throughput, float64 when checking gradients.

Convolutions are "valid" (no padding) and are evaluated as one GEMM per
kernel offset, which keeps peak memory at a fraction of an im2col buffer
while still routing the arithmetic through BLAS.
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def conv3d_forward(x, w, b):
    """x (N,C,X,Y,Z), w (F,C,kx,ky,kz), b (F,) -> out (N,F,X-kx+1,...)."""
    n, c, xs_, ys_, zs_ = x.shape
    f, cw, kx, ky, kz = w.shape
    if cw != c:
        raise ValueError(f"weight expects {cw} channels, input has {c}")
    ox, oy, oz = xs_ - kx + 1, ys_ - ky + 1, zs_ - kz + 1
    if min(ox, oy, oz) < 1:
        raise ValueError(f"input {x.shape[2:]} too small for kernel {(kx, ky, kz)}")
    out = np.broadcast_to(b.reshape(1, f, 1, 1, 1), (n, f, ox, oy, oz)).astype(x.dtype)
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                xs = x[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz]
                part = np.tensordot(w[:, :, dx, dy, dz], xs, axes=([1], [1]))
                out += part.transpose(1, 0, 2, 3, 4)
    return out, (x, w)


def conv3d_backward(dout, cache):
    x, w = cache
    f, c, kx, ky, kz = w.shape
    ox, oy, oz = dout.shape[2:]
    dx_ = np.zeros_like(x)
    dw = np.empty_like(w)
    db = dout.sum(axis=(0, 2, 3, 4))
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                xs = x[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz]
                dw[:, :, dx, dy, dz] = np.tensordot(
                    dout, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                grad = np.tensordot(w[:, :, dx, dy, dz], dout, axes=([0], [1]))
                dx_[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz] += (
                    grad.transpose(1, 0, 2, 3, 4)
                )
    return dx_, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      training, momentum=0.9, eps=BN_EPS):
    """Per-channel normalization over (batch, spatial).

    In training mode the (biased) batch statistics normalize the activations
    and update the running buffers in place; in inference mode the running
    buffers are used directly.
    """
    axes = (0, 2, 3, 4)
    shape = (1, x.shape[1], 1, 1, 1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    cache = (x_hat, gamma, inv_std, training)
    return out, cache


def batchnorm_backward(dout, cache):
    x_hat, gamma, inv_std, training = cache
    axes = (0, 2, 3, 4)
    shape = (1, dout.shape[1], 1, 1, 1)
    dgamma = (dout * x_hat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = gamma.reshape(shape) * inv_std.reshape(shape)
    if not training:
        return dout * g, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3] * dout.shape[4]
    dx = (g / m) * (
        m * dout
        - dbeta.reshape(shape)
        - x_hat * dgamma.reshape(shape)
    )
    return dx, dgamma, dbeta


def prelu_forward(x, alpha):
    """Per-channel leaky rectifier with a learned negative slope."""
    neg = x < 0
    shape = (1, x.shape[1], 1, 1, 1)
    out = np.where(neg, alpha.reshape(shape) * x, x)
    return out, (x, alpha, neg)


def prelu_backward(dout, cache):
    x, alpha, neg = cache
    shape = (1, x.shape[1], 1, 1, 1)
    dalpha = (dout * x * neg).sum(axis=(0, 2, 3, 4))
    dx = dout * np.where(neg, alpha.reshape(shape), x.dtype.type(1))
    return dx, dalpha


def upsample_repeat_forward(x, factor=3):
    """Nearest-neighbour in-plane upsampling (x and y only)."""
    out = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    return out, (x.shape, factor)


def upsample_repeat_backward(dout, cache):
    in_shape, factor = cache
    n, c, ox, oy, oz = in_shape
    return dout.reshape(n, c, ox, factor, oy, factor, oz).sum(axis=(3, 5))


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, cache):
    p = cache
    return dout * p * (1.0 - p)


def broadcast_spatial_forward(x, spatial):
    """Tile a (N,C,1,1,1) tensor (or (N,C), reshaped) over a spatial grid."""
    n, c = x.shape[:2]
    out = np.broadcast_to(x.reshape(n, c, 1, 1, 1), (n, c) + tuple(spatial)).copy()
    return out, x.shape


def broadcast_spatial_backward(dout, cache):
    in_shape = cache
    return dout.sum(axis=(2, 3, 4)).reshape(in_shape)
