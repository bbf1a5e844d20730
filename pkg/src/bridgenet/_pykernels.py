"""Pure-numpy versions of the patch-extraction kernels in ``_ckernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, out_h, out_w):
    B, C = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * out_h * out_w, C * kh * kw)


def col2im(cols, B, C, H, W, kh, kw, stride, out_h, out_w):
    img = np.zeros((B, C, H, W), dtype=np.float64)
    patches = cols.reshape(B, out_h, out_w, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    y_end = (out_h - 1) * stride + 1
    x_end = (out_w - 1) * stride + 1
    for u in range(kh):
        for v in range(kw):
            img[:, :, u : u + y_end : stride, v : v + x_end : stride] += patches[:, :, u, v]
    return img
