# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for NHWC float64 arrays with zero padding."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad_h, int pad_w, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    out = np.empty((n, ho, wo, k, k, c), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, i, j, di, dj, r, s
    cdef size_t row = c * sizeof(double)
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for di in range(k):
                        r = i * stride + di - pad_h
                        for dj in range(k):
                            s = j * stride + dj - pad_w
                            if r < 0 or r >= h or s < 0 or s >= w:
                                memset(&cols[b, i, j, di, dj, 0], 0, row)
                            else:
                                memcpy(&cols[b, i, j, di, dj, 0], &x[b, r, s, 0], row)
    return out


def col2im(const double[:, :, :, :, :, ::1] cols, int h, int w, int stride, int pad_h, int pad_w):
    # gather per input pixel, taps summed in (di, dj) order like the numpy path
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t k = cols.shape[3], c = cols.shape[5]
    out = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, i, j, di, dj, ch, r, s, ti, tj
    with nogil:
        for b in range(n):
            for r in range(h):
                for s in range(w):
                    for di in range(k):
                        ti = r + pad_h - di
                        if ti < 0 or ti % stride != 0:
                            continue
                        i = ti // stride
                        if i >= ho:
                            continue
                        for dj in range(k):
                            tj = s + pad_w - dj
                            if tj < 0 or tj % stride != 0:
                                continue
                            j = tj // stride
                            if j >= wo:
                                continue
                            for ch in range(c):
                                dx[b, r, s, ch] += cols[b, i, j, di, dj, ch]
    return out
