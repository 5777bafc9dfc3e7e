"""Convolution and pooling inner loops.

Two interchangeable implementations live here: numba ``@njit`` loops and a
pure-numpy path built from strided views. Set ``DRSL_DISABLE_NUMBA=1`` in the
environment (before import) to force the numpy path. Both paths accumulate in
the same order, so their outputs are bit-identical.
"""

import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

DISABLED = os.environ.get("DRSL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
HAVE_NUMBA = nb is not None
BACKEND = "numba" if (HAVE_NUMBA and not DISABLED) else "numpy"


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def im2col_np(x, kh, kw, pad):
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw) patch matrix, stride 1."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    Ho, Wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def col2im_np(cols, x_shape, kh, kw, pad):
    """Adjoint of :func:`im2col_np`: scatter-add patch gradients back to the input."""
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    d = cols.reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, Hp, Wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + Ho, j:j + Wo] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])
    return dxp


def maxpool2_np(x):
    """2x2/stride-2 max pool. Returns pooled values and the winning slot (0..3) per window."""
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    win = x[:, :, :2 * H2, :2 * W2].reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H2, W2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool2_backward_np(grad, idx, x_shape):
    B, C, H, W = x_shape
    H2, W2 = grad.shape[2], grad.shape[3]
    slots = np.zeros((B, C, H2, W2, 4))
    np.put_along_axis(slots, idx[..., None], grad[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * H2, :2 * W2] = (
        slots.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
    )
    return dx


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _njit = nb.njit(cache=True, nogil=True)

    @_njit
    def _im2col_loop(x, kh, kw, pad, out):
        B, C, H, W = x.shape
        Ho = H + 2 * pad - kh + 1
        Wo = W + 2 * pad - kw + 1
        for b in range(B):
            for yo in range(Ho):
                for xo in range(Wo):
                    row = (b * Ho + yo) * Wo + xo
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            yi = yo + i - pad
                            for j in range(kw):
                                xi = xo + j - pad
                                if 0 <= yi < H and 0 <= xi < W:
                                    out[row, col] = x[b, c, yi, xi]
                                else:
                                    out[row, col] = 0.0
                                col += 1
        return out

    @_njit
    def _col2im_loop(cols, B, C, H, W, kh, kw, pad, dxp):
        Hp = H + 2 * pad
        Wp = W + 2 * pad
        Ho = Hp - kh + 1
        Wo = Wp - kw + 1
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        col = (c * kh + i) * kw + j
                        for yo in range(Ho):
                            for xo in range(Wo):
                                dxp[b, c, yo + i, xo + j] += cols[(b * Ho + yo) * Wo + xo, col]
        return dxp

    @_njit
    def _maxpool2_loop(x, out, idx):
        B, C, H2, W2 = out.shape
        for b in range(B):
            for c in range(C):
                for y in range(H2):
                    for z in range(W2):
                        best = x[b, c, 2 * y, 2 * z]
                        k = 0
                        for s in range(1, 4):
                            v = x[b, c, 2 * y + s // 2, 2 * z + s % 2]
                            if v > best:
                                best = v
                                k = s
                        out[b, c, y, z] = best
                        idx[b, c, y, z] = k
        return out, idx

    @_njit
    def _maxpool2_backward_loop(grad, idx, dx):
        B, C, H2, W2 = grad.shape
        for b in range(B):
            for c in range(C):
                for y in range(H2):
                    for z in range(W2):
                        k = idx[b, c, y, z]
                        dx[b, c, 2 * y + k // 2, 2 * z + k % 2] = grad[b, c, y, z]
        return dx


def im2col_nb(x, kh, kw, pad):
    B, C, H, W = x.shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.empty((B * Ho * Wo, C * kh * kw))
    return _im2col_loop(np.ascontiguousarray(x), kh, kw, pad, out)


def col2im_nb(cols, x_shape, kh, kw, pad):
    B, C, H, W = x_shape
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    _col2im_loop(np.ascontiguousarray(cols), B, C, H, W, kh, kw, pad, dxp)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])
    return dxp


def maxpool2_nb(x):
    B, C, H, W = x.shape
    out = np.empty((B, C, H // 2, W // 2))
    idx = np.empty((B, C, H // 2, W // 2), dtype=np.int64)
    return _maxpool2_loop(np.ascontiguousarray(x), out, idx)


def maxpool2_backward_nb(grad, idx, x_shape):
    dx = np.zeros(x_shape)
    return _maxpool2_backward_loop(np.ascontiguousarray(grad), idx, dx)


if BACKEND == "numba":
    im2col, col2im = im2col_nb, col2im_nb
    maxpool2, maxpool2_backward = maxpool2_nb, maxpool2_backward_nb
else:
    im2col, col2im = im2col_np, col2im_np
    maxpool2, maxpool2_backward = maxpool2_np, maxpool2_backward_np
