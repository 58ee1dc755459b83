"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures, same NHWC layout, same accumulation order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (N, Ho, Wo, C, kh, kw) view -> (N, Ho, Wo, kh, kw, C) copy
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im(cols: np.ndarray, h: int, w: int, pad: int) -> np.ndarray:
    n, ho, wo, kh, kw, c = cols.shape
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for di in range(kh):
        for dj in range(kw):
            padded[:, di:di + ho, dj:dj + wo, :] += cols[:, :, :, di, dj, :]
    if pad == 0:
        return padded
    return np.ascontiguousarray(padded[:, pad:pad + h, pad:pad + w, :])


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    x = x[:, : 2 * ho, : 2 * wo, :]
    win = x.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int8)


def maxpool2_backward(dout: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    n, ho, wo, c = dout.shape
    win = np.zeros((n, ho, wo, c, 4))
    np.put_along_axis(win, arg.astype(np.intp)[..., None], dout[..., None], axis=-1)
    dx = np.zeros((n, h, w, c))
    dx[:, : 2 * ho, : 2 * wo, :] = (
        win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    )
    return dx


def batchnorm_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    m = x.shape[0]
    mean = x.sum(axis=0) / m
    centered = x - mean
    var = (centered * centered).sum(axis=0) / m
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    return gamma * xhat + beta, xhat, mean, var, invstd


def batchnorm_eval_forward(x, gamma, beta, mean, var, eps):
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * invstd
    return gamma * xhat + beta, xhat, invstd


def batchnorm_backward(g, xhat, gamma, invstd, train: bool):
    m = float(g.shape[0])
    dbeta = g.sum(axis=0)
    dgamma = (g * xhat).sum(axis=0)
    dxhat = g * gamma
    if not train:
        return dxhat * invstd, dgamma, dbeta
    s1 = dxhat.sum(axis=0)
    s2 = (dxhat * xhat).sum(axis=0)
    return (invstd / m) * (m * dxhat - s1 - xhat * s2), dgamma, dbeta
