"""Dense numpy kernels backing the differentiable ops.

Convolutions follow the cross-correlation convention (no kernel flip) with
zero padding, and are evaluated as im2col + BLAS matmul. Scatter loops run
over the k^3 kernel offsets in a fixed order, so results do not depend on
any thread pool.

Tensor layout is (B, C, D0, D1, D2) throughout.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def conv_out_dim(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _strided_windows(xpad: np.ndarray, k: int, stride: int) -> np.ndarray:
    # view (B, C, o0, o1, o2, k, k, k); no copy
    v = np.lib.stride_tricks.sliding_window_view(xpad, (k, k, k), axis=(2, 3, 4))
    return v[:, :, ::stride, ::stride, ::stride]


def _im2col(xpad: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Return (B*N, C*k^3) patch matrix and the output spatial dims."""
    w = _strided_windows(xpad, k, stride)
    b, c, o0, o1, o2 = w.shape[:5]
    cols = w.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * o0 * o1 * o2, c * k * k * k)
    return np.ascontiguousarray(cols), (o0, o1, o2)


def conv3d_forward(x, w, bias, stride: int, pad: int):
    """x (B,Cin,*), w (Cout,Cin,k,k,k), bias (Cout,) or None."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    xpad = _pad_spatial(x, pad)
    cols, (o0, o1, o2) = _im2col(xpad, k, stride)
    y = cols @ w.reshape(cout, -1).T
    if bias is not None:
        y += bias
    b = x.shape[0]
    return y.reshape(b, o0, o1, o2, cout).transpose(0, 4, 1, 2, 3).copy()


def conv3d_grad_weight(gy, x, k: int, stride: int, pad: int):
    """gy (B,Cout,o*), x (B,Cin,*). Returns (grad_w, grad_bias)."""
    cout = gy.shape[1]
    xpad = _pad_spatial(x, pad)
    cols, _ = _im2col(xpad, k, stride)
    gmat = gy.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    gw = (gmat.T @ cols).reshape(cout, x.shape[1], k, k, k)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gw, gb


def conv3d_grad_input(gy, w, in_shape, stride: int, pad: int):
    """Scatter the patch gradients back onto the (padded) input grid."""
    b, cin = in_shape[0], in_shape[1]
    cout, k = w.shape[0], w.shape[2]
    o0, o1, o2 = gy.shape[2:]
    gmat = gy.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    gcols = gmat @ w.reshape(cout, -1)  # (B*N, Cin*k^3)
    gcols = gcols.reshape(b, o0, o1, o2, cin, k, k, k)
    p0, p1, p2 = (in_shape[2] + 2 * pad, in_shape[3] + 2 * pad, in_shape[4] + 2 * pad)
    gx = np.zeros((b, cin, p0, p1, p2), dtype=gy.dtype)
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :, i:i + s * o0:s, j:j + s * o1:s, l:l + s * o2:s] += \
                    gcols[:, :, :, :, :, i, j, l].transpose(0, 4, 1, 2, 3)
    if pad:
        gx = gx[:, :, pad:-pad or None, pad:-pad or None, pad:-pad or None]
    return np.ascontiguousarray(gx)


def convt_out_dim(n: int, k: int, stride: int, pad: int) -> int:
    return stride * (n - 1) + k - 2 * pad


def convt3d_forward(x, w, bias, stride: int, pad: int):
    """Transposed conv: adjoint of conv3d. x (B,Cin,*), w (Cin,Cout,k,k,k)."""
    b, cin = x.shape[0], x.shape[1]
    cout, k = w.shape[1], w.shape[2]
    out = tuple(convt_out_dim(n, k, stride, pad) for n in x.shape[2:])
    # scatter x windows into the padded output, same fixed offset order
    padded = tuple(o + 2 * pad for o in out)
    y = np.zeros((b, cout, *padded), dtype=x.dtype)
    # contribution of input site n to output offset stride*n + (i,j,l)
    wmat = w.reshape(cin, -1)  # (Cin, Cout*k^3)
    xm = x.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    cols = (xm @ wmat).reshape(b, *x.shape[2:], cout, k, k, k)
    n0, n1, n2 = x.shape[2:]
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                y[:, :, i:i + s * n0:s, j:j + s * n1:s, l:l + s * n2:s] += \
                    cols[:, :, :, :, :, i, j, l].transpose(0, 4, 1, 2, 3)
    if pad:
        y = y[:, :, pad:-pad or None, pad:-pad or None, pad:-pad or None]
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.reshape(1, cout, 1, 1, 1)
    return y


def convt3d_grad_input(gy, w, stride: int, pad: int):
    """Adjoint of the scatter: a plain conv of gy with w read as a
    (Cin, Cout, k,k,k) correlation weight."""
    return conv3d_forward(gy, w, None, stride, pad)


def convt3d_grad_weight(gy, x, k: int, stride: int, pad: int):
    """Returns (grad_w (Cin,Cout,k,k,k), grad_bias (Cout,))."""
    gypad = _pad_spatial(gy, pad)
    windows = _strided_windows(gypad, k, stride)  # (B, Cout, n0, n1, n2, k,k,k)
    gw = np.einsum("bcn m l i j k, b d n m l -> d c i j k", windows, x, optimize=True)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(gw), gb


def corr1d_valid(x: np.ndarray, kern: np.ndarray, axis: int) -> np.ndarray:
    """Valid cross-correlation with an odd-length 1-D kernel along one axis."""
    w = kern.size
    c = w // 2
    full = ndimage.correlate1d(x, kern, axis=axis, mode="constant", cval=0.0)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(c, x.shape[axis] - (w - 1 - c))
    return np.ascontiguousarray(full[tuple(sl)])


def corr1d_valid_grad(gy: np.ndarray, kern: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of corr1d_valid: full correlation with the reversed kernel."""
    w = kern.size
    c = w // 2
    pad = [(0, 0)] * gy.ndim
    pad[axis] = (w - 1, w - 1)
    padded = np.pad(gy, pad)
    full = ndimage.correlate1d(padded, np.ascontiguousarray(kern[::-1]),
                               axis=axis, mode="constant", cval=0.0)
    sl = [slice(None)] * gy.ndim
    sl[axis] = slice(c, c + gy.shape[axis] + w - 1)
    return np.ascontiguousarray(full[tuple(sl)])


def trilinear_point_sample(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a 3-D array at fractional voxel coordinates, zero outside.

    data: (N0, N1, N2); pts: (M, 3) in voxel units. Returns (M,) float64.
    """
    n = np.asarray(data.shape)
    q = np.asarray(pts, dtype=np.float64)
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    out = np.zeros(len(q), dtype=np.float64)
    flat = data.reshape(-1).astype(np.float64, copy=False)
    strides = np.array([data.shape[1] * data.shape[2], data.shape[2], 1], dtype=np.int64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=np.int64)
        idx = i0 + off
        valid = np.all((idx >= 0) & (idx < n), axis=1)
        w = np.prod(np.where(off == 1, f, 1.0 - f), axis=1)
        ic = np.clip(idx, 0, n - 1) @ strides
        out += np.where(valid, w * flat[ic], 0.0)
    return out
