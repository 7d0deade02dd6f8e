"""Hot numeric kernels: patch extraction for convolution and the L-BFGS two-loop.

Each kernel has a numba implementation and a pure-numpy one with identical
semantics. The numba path is used when numba imports cleanly unless the
environment variable ``DROPLEAK_PURE_NUMPY`` is set to a non-empty value other
than ``0``. The choice is made once, at import time.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("DROPLEAK_PURE_NUMPY", "") not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy path requested")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference implementations

def _im2col_np(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        hi = i + stride * oh
        for j in range(k):
            wj = j + stride * ow
            cols[:, i, j] = xp[:, :, i:hi:stride, j:wj:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * oh * ow)


def _col2im_np(cols, n, c, h, w, k, stride, pad):
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, n, oh, ow)
    for i in range(k):
        hi = i + stride * oh
        for j in range(k):
            wj = j + stride * ow
            xp[:, :, i:hi:stride, j:wj:stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def _two_loop_np(grad, s_hist, y_hist, rho, order):
    q = grad.copy()
    m = order.shape[0]
    alpha = np.empty(m)
    for idx in range(m - 1, -1, -1):
        slot = order[idx]
        alpha[idx] = rho[slot] * np.dot(s_hist[slot], q)
        q -= alpha[idx] * y_hist[slot]
    if m > 0:
        last = order[m - 1]
        q *= np.dot(s_hist[last], y_hist[last]) / np.dot(y_hist[last], y_hist[last])
    for idx in range(m):
        slot = order[idx]
        beta = rho[slot] * np.dot(y_hist[slot], q)
        q += (alpha[idx] - beta) * s_hist[slot]
    return -q


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        cols = np.zeros((c * k * k, n * oh * ow), dtype=x.dtype)
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for ni in range(n):
                        base = ni * oh * ow
                        for a in range(oh):
                            hh = a * stride + i - pad
                            if hh < 0 or hh >= h:
                                continue
                            for b in range(ow):
                                ww = b * stride + j - pad
                                if ww >= 0 and ww < w:
                                    cols[row, base + a * ow + b] = x[ni, ci, hh, ww]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, pad):
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        x = np.zeros((n, c, h, w), dtype=cols.dtype)
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for ni in range(n):
                        base = ni * oh * ow
                        for a in range(oh):
                            hh = a * stride + i - pad
                            if hh < 0 or hh >= h:
                                continue
                            for b in range(ow):
                                ww = b * stride + j - pad
                                if ww >= 0 and ww < w:
                                    x[ni, ci, hh, ww] += cols[row, base + a * ow + b]
        return x

    @njit(cache=True)
    def _two_loop_nb(grad, s_hist, y_hist, rho, order):
        q = grad.copy()
        m = order.shape[0]
        nvar = q.shape[0]
        alpha = np.empty(m)
        for idx in range(m - 1, -1, -1):
            slot = order[idx]
            acc = 0.0
            for t in range(nvar):
                acc += s_hist[slot, t] * q[t]
            alpha[idx] = rho[slot] * acc
            for t in range(nvar):
                q[t] -= alpha[idx] * y_hist[slot, t]
        if m > 0:
            last = order[m - 1]
            sy = 0.0
            yy = 0.0
            for t in range(nvar):
                sy += s_hist[last, t] * y_hist[last, t]
                yy += y_hist[last, t] * y_hist[last, t]
            gamma = sy / yy
            for t in range(nvar):
                q[t] *= gamma
        for idx in range(m):
            slot = order[idx]
            acc = 0.0
            for t in range(nvar):
                acc += y_hist[slot, t] * q[t]
            beta = rho[slot] * acc
            for t in range(nvar):
                q[t] += (alpha[idx] - beta) * s_hist[slot, t]
        return -q


# ---------------------------------------------------------------------------
# dispatch

def im2col(x, k, stride, pad):
    """Lower an (N, C, H, W) array to a (C*k*k, N*OH*OW) patch matrix.

    Row ``(c*k + i)*k + j`` holds input channel ``c`` at kernel offset
    ``(i, j)``; column ``n*OH*OW + oh*OW + ow`` is output position ``(oh, ow)``
    of sample ``n``. Out-of-bounds (padding) taps read as zero.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _im2col_nb(x, k, stride, pad)
    return _im2col_np(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to image layout."""
    n, c, h, w = x_shape
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if HAVE_NUMBA:
        return _col2im_nb(cols, n, c, h, w, k, stride, pad)
    return _col2im_np(cols, n, c, h, w, k, stride, pad)


def two_loop(grad, s_hist, y_hist, rho, order):
    """L-BFGS search direction ``-H grad`` from the curvature pairs in ``order``.

    ``order`` lists ring-buffer slots from oldest to newest. With no pairs the
    result is steepest descent. The initial inverse Hessian is scaled by
    ``s'y / y'y`` of the newest pair.
    """
    order = np.asarray(order, dtype=np.int64)
    if HAVE_NUMBA:
        return _two_loop_nb(grad, s_hist, y_hist, rho, order)
    return _two_loop_np(grad, s_hist, y_hist, rho, order)
