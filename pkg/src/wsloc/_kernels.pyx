# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im (channels-last) and row-wise extrema scans.

Each routine has a numpy twin in ``_fallback`` and both must agree bit for
bit, so ``col2im`` accumulates kernel offsets in the same row-major order
as the fallback.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride,
           int pad_top, int pad_left, int oh, int ow):
    """(n, h, w, c) -> (n*oh*ow, kh*kw*c) patch matrix, zero outside the image."""
    cdef Py_ssize_t n_batch = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_batch * oh * ow, kh * kw * c), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, oy, ox, ki, kj, iy, ix, row, col, ch
    cdef real* dst
    cdef real* src
    with nogil:
        for n in range(n_batch):
            for oy in range(oh):
                for ox in range(ow):
                    row = (n * oh + oy) * ow + ox
                    col = 0
                    for ki in range(kh):
                        iy = oy * stride + ki - pad_top
                        for kj in range(kw):
                            ix = ox * stride + kj - pad_left
                            dst = &cols[row, col]
                            if iy < 0 or iy >= h or ix < 0 or ix >= w:
                                for ch in range(c):
                                    dst[ch] = 0
                            else:
                                src = &x[n, iy, ix, 0]
                                for ch in range(c):
                                    dst[ch] = src[ch]
                            col += c
    return out


def col2im(real[:, ::1] cols, int n_batch, int h, int w, int c, int kh, int kw,
           int stride, int pad_top, int pad_left, int oh, int ow):
    """Adjoint of :func:`im2col`: scatter-add patches back to (n, h, w, c)."""
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, oy, ox, ki, kj, iy, ix, row, col, ch
    with nogil:
        for n in range(n_batch):
            for ki in range(kh):
                for kj in range(kw):
                    col = (ki * kw + kj) * c
                    for oy in range(oh):
                        iy = oy * stride + ki - pad_top
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + kj - pad_left
                            if ix < 0 or ix >= w:
                                continue
                            row = (n * oh + oy) * ow + ox
                            for ch in range(c):
                                dx[n, iy, ix, ch] = dx[n, iy, ix, ch] + cols[row, col + ch]
    return out


def row_extrema(real[:, ::1] rows):
    """Per-row (max, argmax, min, argmin); ties go to the first index."""
    cdef Py_ssize_t n_rows = rows.shape[0], length = rows.shape[1]
    dtype = np.float32 if real is float else np.float64
    vmax = np.empty(n_rows, dtype=dtype)
    vmin = np.empty(n_rows, dtype=dtype)
    imax = np.empty(n_rows, dtype=np.int64)
    imin = np.empty(n_rows, dtype=np.int64)
    cdef real[::1] vmax_v = vmax, vmin_v = vmin
    cdef cnp.int64_t[::1] imax_v = imax, imin_v = imin
    cdef Py_ssize_t r, j, bi, si
    cdef real hi, lo, v
    with nogil:
        for r in range(n_rows):
            hi = rows[r, 0]
            lo = hi
            bi = 0
            si = 0
            for j in range(1, length):
                v = rows[r, j]
                if v > hi:
                    hi = v
                    bi = j
                elif v < lo:
                    lo = v
                    si = j
            vmax_v[r] = hi
            vmin_v[r] = lo
            imax_v[r] = bi
            imin_v[r] = si
    return vmax, imax, vmin, imin
