# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: forward compositing and its adjoint.

Arithmetic order here must match ``_raster_py`` and ``reference`` term for
term, otherwise bit-identical comparisons between renderers break.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def libm_exp(x):
    """Elementwise C-library exp, the same routine the kernels call."""
    cdef double[::1] src = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = exp(src[i])
    return out.reshape(np.shape(x))


def forward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opacity,
            const double[:, ::1] color, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
            int width, int height, int tile, const double[::1] bg,
            double alpha_max, double alpha_min, double t_min, double cutoff):
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    image_np = np.empty((height, width, 3), dtype=np.float64)
    final_t_np = np.empty((height, width), dtype=np.float64)
    last_np = np.empty((height, width), dtype=np.int64)
    cdef double[:, :, ::1] image = image_np
    cdef double[:, ::1] final_t = final_t_np
    cdef cnp.int64_t[:, ::1] last = last_np
    cdef int ty, tx, px, py, t_idx
    cdef Py_ssize_t k, start, end, g, lst
    cdef double T, cr, cg, cb, dx, dy, q, alpha, w
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                t_idx = ty * tiles_x + tx
                start = tile_ptr[t_idx]
                end = tile_ptr[t_idx + 1]
                for py in range(ty * tile, min((ty + 1) * tile, height)):
                    for px in range(tx * tile, min((tx + 1) * tile, width)):
                        T = 1.0
                        cr = 0.0
                        cg = 0.0
                        cb = 0.0
                        lst = start
                        for k in range(start, end):
                            g = tile_ids[k]
                            dx = px - mean2d[g, 0]
                            dy = py - mean2d[g, 1]
                            q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                            if q > cutoff:
                                continue
                            alpha = opacity[g] * exp(-0.5 * q)
                            if alpha > alpha_max:
                                alpha = alpha_max
                            if alpha < alpha_min:
                                continue
                            w = alpha * T
                            cr = cr + color[g, 0] * w
                            cg = cg + color[g, 1] * w
                            cb = cb + color[g, 2] * w
                            T = T * (1.0 - alpha)
                            lst = k + 1
                            if T < t_min:
                                break
                        image[py, px, 0] = cr + T * bg[0]
                        image[py, px, 1] = cg + T * bg[1]
                        image[py, px, 2] = cb + T * bg[2]
                        final_t[py, px] = T
                        last[py, px] = lst
    return image_np, final_t_np, last_np


def backward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opacity,
             const double[:, ::1] color, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
             int width, int height, int tile, const double[::1] bg,
             double alpha_max, double alpha_min, double t_min, double cutoff,
             const double[:, ::1] final_t, const cnp.int64_t[:, ::1] last, const double[:, :, ::1] grad_image):
    cdef Py_ssize_t n = mean2d.shape[0]
    d_mean_np = np.zeros((n, 2), dtype=np.float64)
    d_conic_np = np.zeros((n, 3), dtype=np.float64)
    d_op_np = np.zeros(n, dtype=np.float64)
    d_color_np = np.zeros((n, 3), dtype=np.float64)
    cdef double[:, ::1] d_mean = d_mean_np
    cdef double[:, ::1] d_conic = d_conic_np
    cdef double[::1] d_op = d_op_np
    cdef double[:, ::1] d_color = d_color_np
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ty, tx, px, py, t_idx
    cdef Py_ssize_t k, start, g
    cdef double T, gr, gg, gb, ar, ag, ab, dx, dy, q, G, raw, alpha, w, one_m
    cdef double d_alpha, d_q, a, b, c
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                t_idx = ty * tiles_x + tx
                start = tile_ptr[t_idx]
                for py in range(ty * tile, min((ty + 1) * tile, height)):
                    for px in range(tx * tile, min((tx + 1) * tile, width)):
                        gr = grad_image[py, px, 0]
                        gg = grad_image[py, px, 1]
                        gb = grad_image[py, px, 2]
                        if gr == 0.0 and gg == 0.0 and gb == 0.0:
                            continue
                        T = final_t[py, px]
                        ar = T * bg[0]
                        ag = T * bg[1]
                        ab = T * bg[2]
                        k = last[py, px] - 1
                        while k >= start:
                            g = tile_ids[k]
                            k = k - 1
                            a = conic[g, 0]
                            b = conic[g, 1]
                            c = conic[g, 2]
                            dx = px - mean2d[g, 0]
                            dy = py - mean2d[g, 1]
                            q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                            if q > cutoff:
                                continue
                            G = exp(-0.5 * q)
                            raw = opacity[g] * G
                            alpha = raw
                            if alpha > alpha_max:
                                alpha = alpha_max
                            if alpha < alpha_min:
                                continue
                            one_m = 1.0 - alpha
                            T = T / one_m
                            w = alpha * T
                            d_color[g, 0] += w * gr
                            d_color[g, 1] += w * gg
                            d_color[g, 2] += w * gb
                            d_alpha = T * (color[g, 0] * gr + color[g, 1] * gg + color[g, 2] * gb) \
                                - (ar * gr + ag * gg + ab * gb) / one_m
                            ar = ar + color[g, 0] * w
                            ag = ag + color[g, 1] * w
                            ab = ab + color[g, 2] * w
                            if raw > alpha_max:
                                continue
                            d_op[g] += d_alpha * G
                            d_q = -0.5 * G * d_alpha * opacity[g]
                            d_mean[g, 0] += -d_q * (2.0 * a * dx + 2.0 * b * dy)
                            d_mean[g, 1] += -d_q * (2.0 * b * dx + 2.0 * c * dy)
                            d_conic[g, 0] += d_q * dx * dx
                            d_conic[g, 1] += d_q * 2.0 * dx * dy
                            d_conic[g, 2] += d_q * dy * dy
    return d_mean_np, d_conic_np, d_op_np, d_color_np
