"""Numpy fallback for the compiled kernels in ``_kernels.pyx``.

Both backends evaluate the same arithmetic in the same order; the resampler
is byte-identical across them, the loss reduction agrees to rounding.
"""
import numpy as np

NAME = "python"

Q_EPS = 1e-7


def _axis_taps(n_in, n_out):
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    s = np.maximum(s, 0.0)
    i0 = np.floor(s).astype(np.intp)
    edge = i0 >= n_in - 1
    i0 = np.where(edge, n_in - 1, i0)
    i1 = np.where(edge, n_in - 1, i0 + 1)
    f = np.where(edge, 0.0, s - i0)
    return i0, i1, f


def resize_bilinear(src, out_h, out_w):
    src = np.ascontiguousarray(src, dtype=np.uint8)
    in_h, in_w, _ = src.shape
    x0, x1, fx = _axis_taps(in_w, out_w)
    y0, y1, fy = _axis_taps(in_h, out_h)
    img = src.astype(np.float64)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = (1.0 - fx) * img[y0][:, x0] + fx * img[y0][:, x1]
    bot = (1.0 - fx) * img[y1][:, x0] + fx * img[y1][:, x1]
    v = (1.0 - fy) * top + fy * bot
    v = np.minimum(np.floor(v + 0.5), 255.0)
    return v.astype(np.uint8)


def pareto_terms(r_prime, scale_index, image_index, phi, tau, n_scales):
    """Per-image sum over occupied scales of the mean scale loss, its d/dphi, and box count."""
    m = phi.shape[0]
    q = phi[image_index] / tau
    dq = np.full(q.shape, 1.0 / tau)
    low = q < Q_EPS
    high = q > 1.0 - Q_EPS
    q = np.where(low, Q_EPS, np.where(high, 1.0 - Q_EPS, q))
    dq[low | high] = 0.0
    r = r_prime
    loss = -(r * np.log(q) + (1.0 - r) * np.log(1.0 - q))
    dloss = -(r / q - (1.0 - r) / (1.0 - q)) * dq
    cell = image_index * n_scales + scale_index
    size = m * n_scales
    sums = np.bincount(cell, weights=loss, minlength=size)
    dsums = np.bincount(cell, weights=dloss, minlength=size)
    counts = np.bincount(cell, minlength=size)
    occupied = counts > 0
    safe = np.where(occupied, counts, 1)
    means = np.where(occupied, sums / safe, 0.0).reshape(m, n_scales)
    dmeans = np.where(occupied, dsums / safe, 0.0).reshape(m, n_scales)
    per_loss = np.zeros(m)
    per_grad = np.zeros(m)
    for s in range(n_scales):
        per_loss += means[:, s]
        per_grad += dmeans[:, s]
    return per_loss, per_grad, counts.reshape(m, n_scales).sum(axis=1).astype(np.int64)
