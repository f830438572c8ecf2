"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def im2col(x, kh, kw, stride, pad_top, pad_left, oh, ow):
    n, h, w, c = x.shape
    pad_bottom = max((oh - 1) * stride + kh - h - pad_top, 0)
    pad_right = max((ow - 1) * stride + kw - w - pad_left, 0)
    xp = np.pad(x, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right), (0, 0)))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, :, ki, kj] = xp[:, ki:ki + stride * (oh - 1) + 1:stride,
                                       kj:kj + stride * (ow - 1) + 1:stride]
    return cols.reshape(n * oh * ow, kh * kw * c)


def col2im(cols, n, h, w, c, kh, kw, stride, pad_top, pad_left, oh, ow):
    hp = max((oh - 1) * stride + kh, h + pad_top)
    wp = max((ow - 1) * stride + kw, w + pad_left)
    cols6 = cols.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki:ki + stride * (oh - 1) + 1:stride,
                kj:kj + stride * (ow - 1) + 1:stride] += cols6[:, :, :, ki, kj]
    return np.ascontiguousarray(dxp[:, pad_top:pad_top + h, pad_left:pad_left + w])


def row_extrema(rows):
    imax = np.argmax(rows, axis=1)
    imin = np.argmin(rows, axis=1)
    idx = np.arange(rows.shape[0])
    return rows[idx, imax], imax.astype(np.int64), rows[idx, imin], imin.astype(np.int64)
