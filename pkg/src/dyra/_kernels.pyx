# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Mirrors ``_kernels_py`` operation for operation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, log

cnp.import_array()

NAME = "cython"

cdef double Q_EPS = 1e-7


def resize_bilinear(const cnp.uint8_t[:, :, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t in_h = src.shape[0], in_w = src.shape[1], ch = src.shape[2]
    out = np.empty((out_h, out_w, ch), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] dst = out
    cdef double sx_scale = <double>in_w / <double>out_w
    cdef double sy_scale = <double>in_h / <double>out_h
    cdef double sx, sy, fx, fy, top, bot, v
    cdef Py_ssize_t x, y, c, x0, x1, y0, y1
    cdef Py_ssize_t[:] xs0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[:] xs1 = np.empty(out_w, dtype=np.intp)
    cdef double[:] fxs = np.empty(out_w, dtype=np.float64)
    for x in range(out_w):
        sx = (x + 0.5) * sx_scale - 0.5
        if sx < 0.0:
            sx = 0.0
        x0 = <Py_ssize_t>floor(sx)
        if x0 >= in_w - 1:
            xs0[x] = in_w - 1
            xs1[x] = in_w - 1
            fxs[x] = 0.0
        else:
            xs0[x] = x0
            xs1[x] = x0 + 1
            fxs[x] = sx - x0
    for y in range(out_h):
        sy = (y + 0.5) * sy_scale - 0.5
        if sy < 0.0:
            sy = 0.0
        y0 = <Py_ssize_t>floor(sy)
        if y0 >= in_h - 1:
            y0 = in_h - 1
            y1 = in_h - 1
            fy = 0.0
        else:
            y1 = y0 + 1
            fy = sy - y0
        for x in range(out_w):
            x0 = xs0[x]
            x1 = xs1[x]
            fx = fxs[x]
            for c in range(ch):
                top = (1.0 - fx) * src[y0, x0, c] + fx * src[y0, x1, c]
                bot = (1.0 - fx) * src[y1, x0, c] + fx * src[y1, x1, c]
                v = (1.0 - fy) * top + fy * bot
                v = floor(v + 0.5)
                if v > 255.0:
                    v = 255.0
                dst[y, x, c] = <cnp.uint8_t>v
    return out


def pareto_terms(const double[::1] r_prime, const cnp.int64_t[::1] scale_index,
                 const cnp.int64_t[::1] image_index, const double[::1] phi,
                 double tau, Py_ssize_t n_scales):
    cdef Py_ssize_t n = r_prime.shape[0], m = phi.shape[0]
    cdef Py_ssize_t b, i, s, cell
    cdef double q, r, lossv, dq
    sums_np = np.zeros(m * n_scales, dtype=np.float64)
    dsums_np = np.zeros(m * n_scales, dtype=np.float64)
    counts_np = np.zeros(m * n_scales, dtype=np.int64)
    per_loss_np = np.zeros(m, dtype=np.float64)
    per_grad_np = np.zeros(m, dtype=np.float64)
    per_count_np = np.zeros(m, dtype=np.int64)
    cdef double[::1] sums = sums_np
    cdef double[::1] dsums = dsums_np
    cdef cnp.int64_t[::1] counts = counts_np
    cdef double[::1] per_loss = per_loss_np
    cdef double[::1] per_grad = per_grad_np
    cdef cnp.int64_t[::1] per_count = per_count_np
    for b in range(n):
        i = image_index[b]
        r = r_prime[b]
        q = phi[i] / tau
        dq = 1.0 / tau
        if q < Q_EPS:
            q = Q_EPS
            dq = 0.0
        elif q > 1.0 - Q_EPS:
            q = 1.0 - Q_EPS
            dq = 0.0
        lossv = -(r * log(q) + (1.0 - r) * log(1.0 - q))
        cell = i * n_scales + scale_index[b]
        sums[cell] += lossv
        dsums[cell] += -(r / q - (1.0 - r) / (1.0 - q)) * dq
        counts[cell] += 1
    for i in range(m):
        for s in range(n_scales):
            cell = i * n_scales + s
            if counts[cell] > 0:
                per_loss[i] += sums[cell] / counts[cell]
                per_grad[i] += dsums[cell] / counts[cell]
                per_count[i] += counts[cell]
    return per_loss_np, per_grad_np, per_count_np
