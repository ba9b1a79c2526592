"""NHWC layer primitives with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache.  Convolutions are 'same'-padded with zeros
and use the weight layout ``(k*k*c_in, c_out)`` ordered (dy, dx, c_in).
"""
import numpy as np


def conv_forward(x, w, b, k):
    n, h, wd, c = x.shape
    p = k // 2
    if k == 1:
        cols = x
    else:
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.concatenate(
            [xp[:, dy:dy + h, dx:dx + wd, :] for dy in range(k) for dx in range(k)], axis=-1
        )
    out = cols.reshape(-1, k * k * c) @ w + b
    return out.reshape(n, h, wd, -1), (cols, x.shape, w, k)


def conv_backward(dout, cache):
    cols, xshape, w, k = cache
    n, h, wd, c = xshape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = cols.reshape(-1, k * k * c).T @ d2
    db = d2.sum(axis=0)
    dcols = (d2 @ w.T).reshape(n, h, wd, k * k * c)
    if k == 1:
        return dcols, dw, db
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    i = 0
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy:dy + h, dx:dx + wd, :] += dcols[..., i * c:(i + 1) * c]
            i += 1
    return dxp[:, p:p + h, p:p + wd, :], dw, db


def relu_forward(x):
    keep = x > 0
    return np.where(keep, x, 0).astype(x.dtype, copy=False), keep


def relu_backward(dout, keep):
    return np.where(keep, dout, 0).astype(dout.dtype, copy=False)


def maxpool_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even sides, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, cache):
    arg, (n, h, w, c) = cache
    onehot = np.zeros(arg.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(onehot, arg[..., None], 1, axis=-1)
    dwin = onehot * dout[..., None]
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
