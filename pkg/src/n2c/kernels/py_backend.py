"""Pure-numpy implementations of the hot kernels.

Used when the compiled core is unavailable or when N2C_KERNELS=python.
Convolutions go through an im2col strided view feeding a BLAS contraction;
the non-local-means filter vectorizes over window offsets.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.ndimage import uniform_filter


def _sliding_view(xp, kh, kw, stride, h_out, w_out):
    """Read-only view [B, C, H', W', kH, kW] over the padded input."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, h_out, w_out, kh, kw)
    strides = (sb, sc, sh * stride, sw * stride, sh, sw)
    return as_strided(xp, shape=shape, strides=strides, writeable=False)


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, kernel, stride, padding):
    """Cross-correlation of x[B,Ci,H,W] with kernel[Co,Ci,kH,kW], zero padded."""
    _, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    cols = _sliding_view(_pad_spatial(x, padding), kh, kw, stride, h_out, w_out)
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))  # [B,H',W',Co]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_kernel(grad_out, x, kh, kw, stride, padding):
    """Gradient of the conv output w.r.t. the kernel."""
    _, _, h_out, w_out = grad_out.shape
    cols = _sliding_view(_pad_spatial(x, padding), kh, kw, stride, h_out, w_out)
    # [Co,Ci,kH,kW] from g[b,co,h',w'] * cols[b,ci,h',w',kh,kw]
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(grad_out, kernel, h, w, stride, padding):
    """Gradient of the conv output w.r.t. the input (scatter over windows)."""
    b = grad_out.shape[0]
    _, ci, kh, kw = kernel.shape
    _, _, h_out, w_out = grad_out.shape
    gxp = np.zeros((b, ci, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            # [B,H',W',Ci] contribution of kernel tap (i,j)
            t = np.tensordot(grad_out, kernel[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                t.transpose(0, 3, 1, 2)
            )
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
    return gxp


def nlm_filter(img, h, patch_size, search_window, sigma2):
    """Patch-similarity weighted average over a square search window.

    Weights are exp(-max(d2 - 2*sigma2, 0) / h^2) with d2 the mean squared
    patch difference; all patches and window centers read from an
    edge-replicated padding of the image.
    """
    f = patch_size // 2
    t = search_window // 2
    pad = t + f
    hh, ww = img.shape
    a = np.pad(np.asarray(img, dtype=np.float64), pad, mode="edge")
    center = a[t : t + hh + 2 * f, t : t + ww + 2 * f]
    inv_h2 = 1.0 / (h * h)
    acc = np.zeros((hh, ww))
    wsum = np.zeros((hh, ww))
    for di in range(-t, t + 1):
        for dj in range(-t, t + 1):
            shifted = a[t + di : t + di + hh + 2 * f, t + dj : t + dj + ww + 2 * f]
            diff2 = (shifted - center) ** 2
            # interior of the uniform filter is an exact patch mean
            d2 = uniform_filter(diff2, size=patch_size)[f : f + hh, f : f + ww]
            wgt = np.exp(-np.maximum(d2 - 2.0 * sigma2, 0.0) * inv_h2)
            acc += wgt * a[pad + di : pad + di + hh, pad + dj : pad + dj + ww]
            wsum += wgt
    return acc / wsum
