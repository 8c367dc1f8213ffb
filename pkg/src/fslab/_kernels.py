"""Compiled inner loops for conv2d.

The forward kernel accumulates every output element in the fixed order
bias, then (in_channel, kernel_row, kernel_col), skipping padded taps. A plain
seven-loop reference with the same order reproduces it bit for bit.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def _conv2d_nhwc(x, w, b, stride, pad):
    # x: N,H,W,C   w: C,KH,KW,O   out: N,Ho,Wo,O
    N, H, W, C = x.shape
    _, KH, KW, O = w.shape
    Ho = (H + 2 * pad - KH) // stride + 1
    Wo = (W + 2 * pad - KW) // stride + 1
    out = np.empty((N, Ho, Wo, O))
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                acc = out[n, i, j]
                acc[:] = b
                for c in range(C):
                    for ki in range(KH):
                        ii = i * stride + ki - pad
                        if ii < 0 or ii >= H:
                            continue
                        for kj in range(KW):
                            jj = j * stride + kj - pad
                            if jj < 0 or jj >= W:
                                continue
                            xv = x[n, ii, jj, c]
                            for o in range(O):
                                acc[o] += xv * w[c, ki, kj, o]
    return out


def conv2d_forward(x, w, b, stride, pad):
    """NCHW convolution (cross-correlation) with zero padding."""
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
    out = _conv2d_nhwc(xt, wt, np.ascontiguousarray(b), stride, pad)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # N,C,Ho,Wo,KH,KW


def conv2d_backward(g, x, w, stride, pad):
    """Return (dx, dw, db) for upstream gradient g of shape N,O,Ho,Wo."""
    N, C, H, W = x.shape
    O, _, KH, KW = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(xp, KH, KW, stride)[:, :, :Ho, :Wo]
    dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,KH,KW
    db = g.sum(axis=(0, 2, 3))
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,KH,KW
    dxp = np.zeros_like(xp)
    for ki in range(KH):
        for kj in range(KW):
            dxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dx), dw, db
