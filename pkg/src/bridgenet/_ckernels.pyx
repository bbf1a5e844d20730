# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled patch-extraction kernels.

Both routines work on C-contiguous float64 NCHW arrays. ``im2col`` gathers
``kh x kw`` patches taken every ``stride`` pixels into rows; ``col2im`` is its
adjoint and scatter-adds rows back into an image-shaped buffer.
"""
import numpy as np


def im2col(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cols_arr = np.empty((B * out_h * out_w, C * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, i, j, u, v, r, k, y0, x0
    with nogil:
        r = 0
        for b in range(B):
            for i in range(out_h):
                y0 = i * stride
                for j in range(out_w):
                    x0 = j * stride
                    k = 0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                cols[r, k] = x[b, c, y0 + u, x0 + v]
                                k += 1
                    r += 1
    return cols_arr


def col2im(double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t out_h, Py_ssize_t out_w):
    img_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] img = img_arr
    cdef Py_ssize_t b, c, i, j, u, v, r, k, y0, x0
    with nogil:
        r = 0
        for b in range(B):
            for i in range(out_h):
                y0 = i * stride
                for j in range(out_w):
                    x0 = j * stride
                    k = 0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                img[b, c, y0 + u, x0 + v] += cols[r, k]
                                k += 1
                    r += 1
    return img_arr
