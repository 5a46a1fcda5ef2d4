"""Pure-numpy dilated convolution kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled kernels are checked against.
"""

import numpy as np


def conv1d_forward(x, w, dilation, pad):
    """Dilated cross-correlation of ``x`` (B, Cin, T) with ``w`` (Cout, Cin, K).

    ``pad`` zeros are prepended along time; output length is
    ``T + pad - (K - 1) * dilation``.
    """
    B, _, T = x.shape
    Cout, _, K = w.shape
    t_out = T + pad - (K - 1) * dilation
    if pad:
        xp = np.zeros((B, x.shape[1], T + pad), dtype=x.dtype)
        xp[:, :, pad:] = x
    else:
        xp = x
    out = np.matmul(w[:, :, 0], xp[:, :, 0:t_out])
    for k in range(1, K):
        s = k * dilation
        out += np.matmul(w[:, :, k], xp[:, :, s:s + t_out])
    return out


def conv1d_backward(grad_out, x, w, dilation, pad, need_x=True, need_w=True):
    """Gradients of :func:`conv1d_forward` w.r.t. ``x`` and ``w``.

    Returns ``(grad_x, grad_w)``; an entry is ``None`` when not requested.
    """
    B, Cin, T = x.shape
    K = w.shape[2]
    t_out = grad_out.shape[2]
    if pad:
        xp = np.zeros((B, Cin, T + pad), dtype=x.dtype)
        xp[:, :, pad:] = x
    else:
        xp = x
    gx = gw = None
    if need_w:
        gw = np.empty_like(w)
        for k in range(K):
            s = k * dilation
            gw[:, :, k] = np.tensordot(grad_out, xp[:, :, s:s + t_out], axes=([0, 2], [0, 2]))
    if need_x:
        gxp = np.zeros((B, Cin, T + pad), dtype=x.dtype)
        for k in range(K):
            s = k * dilation
            gxp[:, :, s:s + t_out] += np.matmul(w[:, :, k].T, grad_out)
        gx = gxp[:, :, pad:] if pad else gxp
    return gx, gw
